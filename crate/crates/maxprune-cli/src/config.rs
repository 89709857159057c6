//! Run configuration: defaults, JSON config files, and flag overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use maxprune::network::{LayerSpec, NetworkSpec, Variant, FC_SIZES};
use maxprune::trainer::TrainConfig;
use maxprune::{Error, Result};

/// Fully resolved configuration of one run. A config file carries these same
/// flat keys as JSON; command-line flags override file values, which override
/// the defaults. `run.json` echoes the resolved result.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: String,
    pub fc_size: usize,
    /// Maxout group size; must divide the maxout layer's input width.
    pub k: usize,
    /// MNIST directory; falls back to $MAXPRUNE_DATA.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub base_lr: f64,
    pub momentum: f32,
    pub weight_decay: f32,
    pub lr_gamma: f64,
    pub lr_power: f64,
    pub iterations: u64,
    pub batch_size: usize,
    /// Evaluate on the test split every this many iterations (0 = never).
    pub eval_every: u64,
    pub prune_steps: usize,
    pub fractions: Vec<f64>,
    pub retrain_iterations: u64,
    pub retrain_base_lr: f64,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        let t = TrainConfig::default();
        RunConfig {
            variant: "mfc".into(),
            fc_size: 512,
            k: 4,
            data_dir: None,
            out_dir: PathBuf::from("."),
            seed: t.seed,
            base_lr: t.base_lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            lr_gamma: t.lr_gamma,
            lr_power: t.lr_power,
            iterations: t.iterations,
            batch_size: t.batch_size,
            eval_every: 0,
            prune_steps: 3,
            fractions: vec![0.0, 0.5, 0.7, 0.9, 0.98],
            retrain_iterations: 4000,
            retrain_base_lr: 1e-3,
            threads: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        if !path.is_file() {
            return Err(Error::Argument(format!(
                "config file not found: {}",
                path.display()
            )));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Argument(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Argument(format!("invalid config {}: {e}", path.display())))
    }

    pub fn variant(&self) -> Result<Variant> {
        self.variant.parse()
    }

    pub fn validate(&self) -> Result<()> {
        let variant = self.variant()?;
        if !FC_SIZES.contains(&self.fc_size) {
            return Err(Error::Argument(format!(
                "fc_size must be one of {FC_SIZES:?}, got {}",
                self.fc_size
            )));
        }
        match variant {
            Variant::Baseline => {}
            Variant::Mfc => {
                if self.k < 2 || self.fc_size % self.k != 0 {
                    return Err(Error::Argument(format!(
                        "k = {} must be >= 2 and divide fc_size = {}",
                        self.k, self.fc_size
                    )));
                }
            }
            Variant::Mc => {
                if self.k < 2 || 64 % self.k != 0 {
                    return Err(Error::Argument(format!(
                        "k = {} must be >= 2 and divide the 64 conv channels",
                        self.k
                    )));
                }
            }
        }
        if self.threads == 0 {
            return Err(Error::Argument("threads must be >= 1".into()));
        }
        if self.fractions.windows(2).any(|p| p[0] >= p[1])
            || self.fractions.iter().any(|f| !(0.0..1.0).contains(f))
        {
            return Err(Error::Argument(
                "fractions must be strictly ascending within [0, 1)".into(),
            ));
        }
        self.train_config().validate()?;
        self.retrain_config().validate()?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            base_lr: self.base_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            lr_gamma: self.lr_gamma,
            lr_power: self.lr_power,
            iterations: self.iterations,
            batch_size: self.batch_size,
            seed: self.seed,
            eval_every: self.eval_every,
        }
    }

    pub fn retrain_config(&self) -> TrainConfig {
        TrainConfig {
            base_lr: self.retrain_base_lr,
            iterations: self.retrain_iterations,
            eval_every: 0,
            ..self.train_config()
        }
    }

    /// Reference architecture with the configured maxout group size.
    pub fn spec(&self) -> Result<NetworkSpec> {
        let mut spec = NetworkSpec::reference(self.variant()?, self.fc_size)?;
        for layer in &mut spec.layers {
            if let LayerSpec::Maxout { k } = layer {
                *k = self.k;
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn resolved_data_dir(&self) -> Result<PathBuf> {
        if let Some(dir) = &self.data_dir {
            return Ok(dir.clone());
        }
        if let Some(env) = std::env::var_os("MAXPRUNE_DATA") {
            return Ok(PathBuf::from(env));
        }
        Err(Error::Argument(
            "no dataset directory: pass --data, set data_dir in the config, or set MAXPRUNE_DATA"
                .into(),
        ))
    }
}
