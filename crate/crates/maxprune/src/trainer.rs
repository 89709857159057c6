//! SGD with momentum, weight decay, and an inverse-decay learning-rate
//! schedule; the training/evaluation loops; and the shorter retraining
//! configuration used after each pruning step.
//!
//! Training is deterministic: given the same config, data, and starting
//! parameters, the final weights are bit-identical, batch schedules come from
//! seeded per-epoch permutations, and evaluation reduces shard results in a
//! fixed order.

use serde::{Deserialize, Serialize};

use crate::dataio::DatasetHandle;
use crate::error::{Error, Result};
use crate::network::{softmax_xent, Gradients, Network};
use crate::tensor::Tensor;

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Inverse decay: lr(t) = base_lr * (1 + lr_gamma * t)^(-lr_power).
    pub lr_gamma: f64,
    pub lr_power: f64,
    pub iterations: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate every this many iterations when an eval set is supplied;
    /// 0 disables periodic evaluation.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_gamma: 1e-4,
            lr_power: 0.75,
            iterations: 10_000,
            batch_size: 64,
            seed: 1,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("base_lr", self.base_lr),
            ("lr_gamma", self.lr_gamma),
            ("lr_power", self.lr_power),
            ("momentum", self.momentum as f64),
            ("weight_decay", self.weight_decay as f64),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Argument(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// The shorter, lower-rate run used to recover accuracy after a pruning
    /// step: 4000 iterations at base_lr 0.001, fresh velocities.
    pub fn retrain(&self) -> TrainConfig {
        TrainConfig {
            base_lr: 0.001,
            iterations: 4_000,
            ..self.clone()
        }
    }
}

/// Learning rate at iteration `iter` under `cfg`'s inverse-decay schedule.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * (1.0 + cfg.lr_gamma * iter as f64).powf(-cfg.lr_power)
}

/// Momentum buffers mirroring the network's parameters.
pub struct OptimState {
    /// `Some((weight velocity, bias velocity))` for parameterized layers.
    velocities: Vec<Option<(Tensor, Tensor)>>,
    iteration: u64,
}

impl OptimState {
    pub fn new(net: &Network) -> OptimState {
        let velocities = (0..net.num_layers())
            .map(|i| {
                net.layer_params(i)
                    .map(|(w, b)| (Tensor::zeros(w.shape().clone()), Tensor::zeros(b.shape().clone())))
            })
            .collect();
        OptimState {
            velocities,
            iteration: 0,
        }
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn velocity(&self, layer: usize) -> Option<(&Tensor, &Tensor)> {
        self.velocities[layer].as_ref().map(|(w, b)| (w, b))
    }
}

fn step_param(w: &mut [f32], g: &[f32], v: &mut [f32], lr: f32, momentum: f32, wd: f32) {
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = momentum * *v - lr * (g + wd * *w);
        *w += *v;
    }
}

/// One SGD-with-momentum update:
/// `v <- momentum*v - lr*(g + weight_decay*w); w <- w + v`,
/// followed by mask re-application (masked weights and velocities forced to
/// exactly 0) and the iteration counter advancing.
pub fn sgd_step(
    net: &mut Network,
    grads: &Gradients,
    state: &mut OptimState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.layers.len() != net.num_layers() {
        return Err(Error::Structure(format!(
            "gradients cover {} layers, network has {}",
            grads.layers.len(),
            net.num_layers()
        )));
    }
    let lr = lr_at(state.iteration, cfg) as f32;
    for i in 0..net.num_layers() {
        let (Some((dw, db)), Some((vw, vb))) = (&grads.layers[i], &mut state.velocities[i]) else {
            if grads.layers[i].is_some() != state.velocities[i].is_some() {
                return Err(Error::Structure(format!(
                    "layer {i}: gradient/velocity presence mismatch"
                )));
            }
            continue;
        };
        let (w, b) = net
            .layer_params_mut(i)
            .ok_or_else(|| Error::Structure(format!("layer {i}: gradient for a layer without parameters")))?;
        if dw.shape() != w.shape() || db.shape() != b.shape() {
            return Err(Error::Structure(format!(
                "layer {i}: gradient shape {}/{} vs parameter shape {}/{}",
                dw.shape(),
                db.shape(),
                w.shape(),
                b.shape()
            )));
        }
        step_param(
            w.data_mut(),
            dw.data(),
            vw.data_mut(),
            lr,
            cfg.momentum,
            cfg.weight_decay,
        );
        step_param(
            b.data_mut(),
            db.data(),
            vb.data_mut(),
            lr,
            cfg.momentum,
            cfg.weight_decay,
        );
        if let Some(mask) = net.layer_mask(i) {
            // Masks freeze pruned weights at zero; their velocities too.
            let mask = mask.to_vec();
            let (w, _) = net.layer_params_mut(i).unwrap();
            for (x, &m) in w.data_mut().iter_mut().zip(&mask) {
                if m {
                    *x = 0.0;
                }
            }
            let (vw, _) = state.velocities[i].as_mut().unwrap();
            for (x, &m) in vw.data_mut().iter_mut().zip(&mask) {
                if m {
                    *x = 0.0;
                }
            }
        }
    }
    state.iteration += 1;
    Ok(())
}

/// One training-step record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: u64,
    pub loss: f32,
    pub lr: f64,
    pub eval_accuracy: Option<f64>,
}

/// Per-iteration log of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub entries: Vec<HistoryEntry>,
}

impl History {
    /// Mean loss over the last `n` recorded steps.
    pub fn mean_recent_loss(&self, n: usize) -> f32 {
        let tail = &self.entries[self.entries.len().saturating_sub(n)..];
        if tail.is_empty() {
            return f32::NAN;
        }
        tail.iter().map(|e| e.loss as f64).sum::<f64>() as f32 / tail.len() as f32
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.entries.iter().rev().find_map(|e| e.eval_accuracy)
    }
}

/// Train `net` in place for `cfg.iterations` steps over seeded epoch
/// shuffles of `data`. Deterministic given (seed, data, config).
pub fn train(net: &mut Network, data: &DatasetHandle, cfg: &TrainConfig) -> Result<History> {
    train_with_eval(net, data, None, cfg)
}

/// [`train`], evaluating on `eval_data` every `cfg.eval_every` iterations.
pub fn train_with_eval(
    net: &mut Network,
    data: &DatasetHandle,
    eval_data: Option<&DatasetHandle>,
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    let mut history = History::default();
    if cfg.iterations == 0 {
        return Ok(history);
    }
    let mut state = OptimState::new(net);
    let mut epoch = 0u64;
    let mut batches = data.batches(cfg.batch_size, cfg.seed, epoch);
    while state.iteration < cfg.iterations {
        let (images, labels) = match batches.next() {
            Some(b) => b,
            None => {
                epoch += 1;
                batches = data.batches(cfg.batch_size, cfg.seed, epoch);
                continue;
            }
        };
        let iteration = state.iteration;
        let lr = lr_at(iteration, cfg);
        let (logits, cache) = net.forward(&images, false)?;
        let (loss, grad_logits) = softmax_xent(&logits, &labels)?;
        let grads = net.backward(&cache, &grad_logits)?;
        sgd_step(net, &grads, &mut state, cfg)?;
        let eval_accuracy = match eval_data {
            Some(eval) if cfg.eval_every > 0 && state.iteration % cfg.eval_every == 0 => {
                Some(evaluate(net, eval)?)
            }
            Some(eval) if state.iteration == cfg.iterations => Some(evaluate(net, eval)?),
            _ => None,
        };
        history.entries.push(HistoryEntry {
            iteration,
            loss,
            lr,
            eval_accuracy,
        });
    }
    Ok(history)
}

const EVAL_BATCH: usize = 250;

fn outcomes_in_range(
    net: &Network,
    data: &DatasetHandle,
    range: std::ops::Range<usize>,
) -> Result<Vec<bool>> {
    let mut outcomes = Vec::with_capacity(range.len());
    let mut at = range.start;
    while at < range.end {
        let end = (at + EVAL_BATCH).min(range.end);
        let indices: Vec<u32> = (at as u32..end as u32).collect();
        let (images, labels) = data.gather(&indices);
        let logits = net.logits(&images)?;
        let (b, classes) = logits.shape().dims2()?;
        for s in 0..b {
            let row = &logits.data()[s * classes..(s + 1) * classes];
            let mut best = 0usize;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            outcomes.push(best == labels[s] as usize);
        }
        at = end;
    }
    Ok(outcomes)
}

fn correct_in_range(net: &Network, data: &DatasetHandle, range: std::ops::Range<usize>) -> Result<u64> {
    Ok(outcomes_in_range(net, data, range)?
        .iter()
        .filter(|&&hit| hit)
        .count() as u64)
}

/// Fraction of samples whose argmax logit equals the label. No winner
/// counting happens during evaluation.
pub fn evaluate(net: &Network, data: &DatasetHandle) -> Result<f64> {
    evaluate_threaded(net, data, 1)
}

/// [`evaluate`] over `threads` contiguous shards. Per-shard hit counts are
/// integers summed in shard order, so results are bit-identical for every
/// thread count.
pub fn evaluate_threaded(net: &Network, data: &DatasetHandle, threads: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("evaluation dataset is empty".into()));
    }
    let threads = threads.max(1).min(data.len());
    let n = data.len();
    let correct: u64 = if threads == 1 {
        correct_in_range(net, data, 0..n)?
    } else {
        let per = n.div_ceil(threads);
        let results = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let range = t * per..((t + 1) * per).min(n);
                    scope.spawn(move || correct_in_range(net, data, range))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation shard panicked"))
                .collect::<Result<Vec<u64>>>()
        })?;
        results.iter().sum()
    };
    Ok(correct as f64 / n as f64)
}

/// Per-sample correctness flags in dataset order, sharded like
/// [`evaluate_threaded`]; the concatenation is identical for every thread
/// count.
pub fn evaluate_outcomes(
    net: &Network,
    data: &DatasetHandle,
    threads: usize,
) -> Result<Vec<bool>> {
    if data.is_empty() {
        return Err(Error::Data("evaluation dataset is empty".into()));
    }
    let threads = threads.max(1).min(data.len());
    let n = data.len();
    if threads == 1 {
        return outcomes_in_range(net, data, 0..n);
    }
    let per = n.div_ceil(threads);
    let shards = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let range = t * per..((t + 1) * per).min(n);
                scope.spawn(move || outcomes_in_range(net, data, range))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation shard panicked"))
            .collect::<Result<Vec<Vec<bool>>>>()
    })?;
    Ok(shards.concat())
}
