//! `maxprune`: train, prune, and evaluate maxout networks on MNIST from the
//! command line.
//!
//! Every subcommand writes a `run.json` with the fully resolved configuration
//! into the output directory. Runs with identical configs and inputs produce
//! byte-identical artifacts; wall-clock timing therefore goes to stdout only,
//! never into files. Input checkpoints are read-only, results land in new
//! files under `--out-dir`.
//!
//! Exit codes: 0 success, 2 usage (bad flags, bad config, missing inputs),
//! 1 runtime failure. Errors print as a single `error: ...` line on stderr.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use config::RunConfig;
use maxprune::dataio::{load_embeddings, load_idx, DatasetHandle};
use maxprune::metrics::{eer, randomization_test, VerificationScores};
use maxprune::network::Network;
use maxprune::persist::{
    load_checkpoint, read_report, save_checkpoint, write_report, ExperimentRecord,
};
use maxprune::pruning::{
    count_winners_threaded, iterative_neuron_prune, prune_weights, prune_weights_fraction,
    stage_record, sweep_weight_pruning,
};
use maxprune::tensor::Rng;
use maxprune::trainer::{evaluate_outcomes, evaluate_threaded, train, train_with_eval};
use maxprune::{Error, Result};

#[derive(Parser)]
#[command(
    name = "maxprune",
    version,
    about = "Maxout neuron pruning and magnitude weight pruning on MNIST"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a network from scratch and save a checkpoint
    Train(TrainArgs),
    /// Count maxout winners over a dataset split
    Count(CountArgs),
    /// Iteratively remove the least active maxout neurons, retraining between steps
    PruneNeurons(PruneNeuronsArgs),
    /// Mask the smallest-magnitude weights, optionally retraining under the mask
    PruneWeights(PruneWeightsArgs),
    /// Mask, retrain, and evaluate across a list of pruning fractions
    Sweep(SweepArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Equal error rate over descriptor pairs in an embeddings file
    Verify(VerifyArgs),
    /// Paired randomization test between two eval outputs
    Compare(CompareArgs),
    /// Merge record CSVs into a single report
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON config file (flat RunConfig keys); flags override its values
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory for artifacts and run.json
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// MNIST directory (default $MAXPRUNE_DATA)
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for evaluation and counting; any value gives bit-identical results
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// baseline, mfc, or mc
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    fc_size: Option<usize>,
    /// Maxout group size
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f32>,
    #[arg(long)]
    weight_decay: Option<f32>,
    #[arg(long)]
    lr_gamma: Option<f64>,
    #[arg(long)]
    lr_power: Option<f64>,
    #[arg(long)]
    eval_every: Option<u64>,
}

#[derive(Args)]
struct CountArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// train or test
    #[arg(long, default_value = "train")]
    split: String,
}

#[derive(Args)]
struct PruneNeuronsArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Prune iterations; each shrinks k by one
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    retrain_iterations: Option<u64>,
    #[arg(long)]
    retrain_base_lr: Option<f64>,
}

#[derive(Args)]
struct PruneWeightsArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Fraction of weights to mask, in [0, 1)
    #[arg(long, conflicts_with = "tau")]
    fraction: Option<f64>,
    /// Magnitude threshold; masks every |w| <= tau
    #[arg(long)]
    tau: Option<f32>,
    /// Retrain under the frozen mask after pruning
    #[arg(long)]
    retrain: bool,
    #[arg(long)]
    retrain_iterations: Option<u64>,
    #[arg(long)]
    retrain_base_lr: Option<f64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Ascending pruning fractions, e.g. 0.0,0.5,0.7,0.9
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    #[arg(long)]
    retrain_iterations: Option<u64>,
    #[arg(long)]
    retrain_base_lr: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// train or test
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Embeddings file: `d <dim>` header, then `m`/`n` pair lines
    #[arg(long, value_name = "FILE")]
    embeddings: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// First eval.json
    #[arg(long, value_name = "FILE")]
    a: PathBuf,
    /// Second eval.json over the same samples
    #[arg(long, value_name = "FILE")]
    b: PathBuf,
    #[arg(long, default_value_t = 999)]
    permutations: usize,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Record CSVs to merge, in order
    #[arg(required = true, value_name = "CSV")]
    inputs: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Argument(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Count(a) => cmd_count(a),
        Cmd::PruneNeurons(a) => cmd_prune_neurons(a),
        Cmd::PruneWeights(a) => cmd_prune_weights(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Verify(a) => cmd_verify(a),
        Cmd::Compare(a) => cmd_compare(a),
        Cmd::Report(a) => cmd_report(a),
    }
}

fn resolve(common: &CommonArgs, apply: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &common.data {
        cfg.data_dir = Some(d.clone());
    }
    if let Some(o) = &common.out_dir {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Argument(format!(
            "missing file: {}",
            path.display()
        )));
    }
    Ok(())
}

fn load_split(dir: &Path, split: &str) -> Result<DatasetHandle> {
    let (img, lab) = match split {
        "train" => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "test" => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        other => {
            return Err(Error::Argument(format!(
                "unknown split {other:?} (expected train or test)"
            )))
        }
    };
    let (images, labels) = (dir.join(img), dir.join(lab));
    require_file(&images)?;
    require_file(&labels)?;
    load_idx(images, labels)
}

fn open_checkpoint(path: &Path) -> Result<Network> {
    require_file(path)?;
    load_checkpoint(path)
}

fn prepare_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Echo the resolved config (and the run's input paths) for provenance.
fn write_run_json(cfg: &RunConfig, subcommand: &str, inputs: &[(&str, String)]) -> Result<()> {
    let mut map = serde_json::Map::new();
    map.insert("subcommand".into(), subcommand.into());
    let config_value = serde_json::to_value(cfg)
        .map_err(|e| Error::Structure(format!("config encode: {e}")))?;
    for (key, value) in config_value.as_object().expect("config is a JSON object") {
        map.insert(key.clone(), value.clone());
    }
    for (key, value) in inputs {
        map.insert((*key).into(), (value.as_str()).into());
    }
    let path = cfg.out_dir.join("run.json");
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(map))
        .expect("JSON maps always serialize");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Timing goes to stdout, never into artifacts, so identical runs stay
/// byte-identical.
fn strip_seconds(records: &mut [ExperimentRecord]) {
    for r in records {
        r.seconds = 0.0;
    }
}

fn print_record(r: &ExperimentRecord) {
    println!(
        "stage={} k={} iteration={} accuracy={:.6} pw_percent={:.4} combined_percent={:.4} dead_fraction={:.4}",
        r.stage, r.k, r.iteration, r.accuracy, r.pw_percent, r.combined_percent, r.dead_fraction
    );
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = resolve(&args.common, |c| {
        if let Some(v) = &args.variant {
            c.variant = v.clone();
        }
        if let Some(v) = args.fc_size {
            c.fc_size = v;
        }
        if let Some(v) = args.k {
            c.k = v;
        }
        if let Some(v) = args.iterations {
            c.iterations = v;
        }
        if let Some(v) = args.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = args.base_lr {
            c.base_lr = v;
        }
        if let Some(v) = args.momentum {
            c.momentum = v;
        }
        if let Some(v) = args.weight_decay {
            c.weight_decay = v;
        }
        if let Some(v) = args.lr_gamma {
            c.lr_gamma = v;
        }
        if let Some(v) = args.lr_power {
            c.lr_power = v;
        }
        if let Some(v) = args.eval_every {
            c.eval_every = v;
        }
    })?;
    let data_dir = cfg.resolved_data_dir()?;
    let train_data = load_split(&data_dir, "train")?;
    let test_data = load_split(&data_dir, "test")?;
    let spec = cfg.spec()?;
    let mut rng = Rng::from_seed(cfg.seed);
    let mut net = Network::init(&spec, &mut rng)?;

    let t0 = Instant::now();
    let tc = cfg.train_config();
    let history = train_with_eval(&mut net, &train_data, Some(&test_data), &tc)?;
    for entry in &history.entries {
        if let Some(acc) = entry.eval_accuracy {
            println!("iteration={} eval_accuracy={acc:.6}", entry.iteration + 1);
        }
    }
    let accuracy = evaluate_threaded(&net, &test_data, cfg.threads)?;
    let seconds = t0.elapsed().as_secs_f64();

    prepare_out_dir(&cfg.out_dir)?;
    save_checkpoint(&net, cfg.out_dir.join("checkpoint.mxpn"))?;
    let record = stage_record("train", &net, accuracy, tc.iterations, 0.0)?;
    write_report(&[record.clone()], cfg.out_dir.join("records.csv"))?;
    write_run_json(&cfg, "train", &[])?;
    println!(
        "variant={} fc_size={} k={} accuracy={accuracy:.6} pw_percent={:.4} seconds={seconds:.1}",
        cfg.variant, cfg.fc_size, cfg.k, record.pw_percent
    );
    Ok(())
}

fn cmd_count(args: CountArgs) -> Result<()> {
    let cfg = resolve(&args.common, |_| {})?;
    let mut net = open_checkpoint(&args.checkpoint)?;
    let data = load_split(&cfg.resolved_data_dir()?, &args.split)?;
    let counts = count_winners_threaded(&mut net, &data, cfg.threads)?;
    prepare_out_dir(&cfg.out_dir)?;
    save_checkpoint(&net, cfg.out_dir.join("counted.mxpn"))?;
    write_run_json(
        &cfg,
        "count",
        &[
            ("checkpoint", args.checkpoint.display().to_string()),
            ("split", args.split.clone()),
        ],
    )?;
    let k = net.maxout_state().expect("counted a maxout net").k_current;
    println!(
        "units={} k={k} positions={} samples={}",
        counts.units.len(),
        counts.total_positions,
        data.len()
    );
    Ok(())
}

fn cmd_prune_neurons(args: PruneNeuronsArgs) -> Result<()> {
    let cfg = resolve(&args.common, |c| {
        if let Some(v) = args.steps {
            c.prune_steps = v;
        }
        if let Some(v) = args.retrain_iterations {
            c.retrain_iterations = v;
        }
        if let Some(v) = args.retrain_base_lr {
            c.retrain_base_lr = v;
        }
    })?;
    let net = open_checkpoint(&args.checkpoint)?;
    let data_dir = cfg.resolved_data_dir()?;
    let train_data = load_split(&data_dir, "train")?;
    let test_data = load_split(&data_dir, "test")?;
    let t0 = Instant::now();
    let (pruned, mut records) = iterative_neuron_prune(
        &net,
        &train_data,
        &test_data,
        &cfg.retrain_config(),
        cfg.prune_steps,
        cfg.threads,
    )?;
    let seconds = t0.elapsed().as_secs_f64();
    strip_seconds(&mut records);
    prepare_out_dir(&cfg.out_dir)?;
    save_checkpoint(&pruned, cfg.out_dir.join("pruned.mxpn"))?;
    write_report(&records, cfg.out_dir.join("records.csv"))?;
    write_run_json(
        &cfg,
        "prune-neurons",
        &[("checkpoint", args.checkpoint.display().to_string())],
    )?;
    for r in &records {
        print_record(r);
    }
    println!("steps={} seconds={seconds:.1}", records.len());
    Ok(())
}

fn cmd_prune_weights(args: PruneWeightsArgs) -> Result<()> {
    let cfg = resolve(&args.common, |c| {
        if let Some(v) = args.retrain_iterations {
            c.retrain_iterations = v;
        }
        if let Some(v) = args.retrain_base_lr {
            c.retrain_base_lr = v;
        }
    })?;
    let net = open_checkpoint(&args.checkpoint)?;
    let data_dir = cfg.resolved_data_dir()?;
    let test_data = load_split(&data_dir, "test")?;

    let t0 = Instant::now();
    let (mut masked, stage, tau) = match (args.fraction, args.tau) {
        (Some(f), None) => {
            let (m, _, tau) = prune_weights_fraction(&net, f)?;
            (m, format!("weight-prune-{f:.4}"), tau)
        }
        (None, Some(tau)) => {
            let (m, _) = prune_weights(&net, tau)?;
            (m, "weight-prune-tau".to_string(), tau)
        }
        _ => {
            return Err(Error::Argument(
                "pass exactly one of --fraction or --tau".into(),
            ))
        }
    };
    if args.retrain {
        let train_data = load_split(&data_dir, "train")?;
        train(&mut masked, &train_data, &cfg.retrain_config())?;
    }
    let accuracy = evaluate_threaded(&masked, &test_data, cfg.threads)?;
    let seconds = t0.elapsed().as_secs_f64();

    let iterations = if args.retrain {
        cfg.retrain_iterations
    } else {
        0
    };
    let record = stage_record(stage, &masked, accuracy, iterations, 0.0)?;
    prepare_out_dir(&cfg.out_dir)?;
    save_checkpoint(&masked, cfg.out_dir.join("masked.mxpn"))?;
    write_report(&[record.clone()], cfg.out_dir.join("records.csv"))?;
    write_run_json(
        &cfg,
        "prune-weights",
        &[("checkpoint", args.checkpoint.display().to_string())],
    )?;
    println!(
        "tau={tau:e} masked={} accuracy={accuracy:.6} combined_percent={:.4} seconds={seconds:.1}",
        record.masked_weights, record.combined_percent
    );
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let cfg = resolve(&args.common, |c| {
        if let Some(v) = &args.fractions {
            c.fractions = v.clone();
        }
        if let Some(v) = args.retrain_iterations {
            c.retrain_iterations = v;
        }
        if let Some(v) = args.retrain_base_lr {
            c.retrain_base_lr = v;
        }
    })?;
    let net = open_checkpoint(&args.checkpoint)?;
    let data_dir = cfg.resolved_data_dir()?;
    let train_data = load_split(&data_dir, "train")?;
    let test_data = load_split(&data_dir, "test")?;
    let t0 = Instant::now();
    let mut records = sweep_weight_pruning(
        &net,
        &cfg.fractions,
        &train_data,
        &test_data,
        &cfg.retrain_config(),
        cfg.threads,
    )?;
    let seconds = t0.elapsed().as_secs_f64();
    strip_seconds(&mut records);
    prepare_out_dir(&cfg.out_dir)?;
    write_report(&records, cfg.out_dir.join("records.csv"))?;
    write_run_json(
        &cfg,
        "sweep",
        &[("checkpoint", args.checkpoint.display().to_string())],
    )?;
    for r in &records {
        print_record(r);
    }
    println!("points={} seconds={seconds:.1}", records.len());
    Ok(())
}

/// Per-sample output of `eval`, consumed by `compare`.
#[derive(Serialize, Deserialize)]
struct EvalOutput {
    checkpoint: String,
    split: String,
    n: usize,
    accuracy: f64,
    /// 1 = correct prediction, 0 = miss, in dataset order.
    outcomes: Vec<u8>,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = resolve(&args.common, |_| {})?;
    let net = open_checkpoint(&args.checkpoint)?;
    let data = load_split(&cfg.resolved_data_dir()?, &args.split)?;
    let outcomes = evaluate_outcomes(&net, &data, cfg.threads)?;
    let hits = outcomes.iter().filter(|&&h| h).count();
    let accuracy = hits as f64 / outcomes.len() as f64;
    let output = EvalOutput {
        checkpoint: args.checkpoint.display().to_string(),
        split: args.split.clone(),
        n: outcomes.len(),
        accuracy,
        outcomes: outcomes.iter().map(|&h| h as u8).collect(),
    };
    prepare_out_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("eval.json");
    let text = serde_json::to_string(&output).expect("eval output serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    write_run_json(
        &cfg,
        "eval",
        &[
            ("checkpoint", args.checkpoint.display().to_string()),
            ("split", args.split.clone()),
        ],
    )?;
    println!("accuracy={accuracy:.6} n={}", output.n);
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<()> {
    let cfg = resolve(&args.common, |_| {})?;
    require_file(&args.embeddings)?;
    let pairs = load_embeddings(&args.embeddings)?;
    let scores = VerificationScores::from_pairs(&pairs)?;
    let result = eer(&scores)?;
    prepare_out_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("verify.json");
    let text = serde_json::json!({
        "embeddings": args.embeddings.display().to_string(),
        "dim": pairs.dim,
        "matched": scores.matched.len(),
        "nonmatched": scores.nonmatched.len(),
        "eer": result.eer,
        "threshold": result.threshold,
    });
    std::fs::write(&path, text.to_string() + "\n").map_err(|e| Error::io(&path, e))?;
    write_run_json(
        &cfg,
        "verify",
        &[("embeddings", args.embeddings.display().to_string())],
    )?;
    println!(
        "eer={:.6} threshold={:.6} matched={} nonmatched={}",
        result.eer,
        result.threshold,
        scores.matched.len(),
        scores.nonmatched.len()
    );
    Ok(())
}

fn read_eval_output(path: &Path) -> Result<EvalOutput> {
    require_file(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::format(0, format!("{}: not an eval output: {e}", path.display())))
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let cfg = resolve(&args.common, |_| {})?;
    let a = read_eval_output(&args.a)?;
    let b = read_eval_output(&args.b)?;
    if a.n != b.n {
        return Err(Error::Argument(format!(
            "eval outputs cover {} and {} samples; the test needs paired outcomes",
            a.n, b.n
        )));
    }
    let to_f64 = |o: &EvalOutput| o.outcomes.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let (va, vb) = (to_f64(&a), to_f64(&b));
    let p = randomization_test(&va, &vb, args.permutations, cfg.seed)?;
    let statistic = (a.accuracy - b.accuracy).abs();
    prepare_out_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("compare.json");
    let text = serde_json::json!({
        "a": args.a.display().to_string(),
        "b": args.b.display().to_string(),
        "n": a.n,
        "accuracy_a": a.accuracy,
        "accuracy_b": b.accuracy,
        "statistic": statistic,
        "permutations": args.permutations,
        "seed": cfg.seed,
        "p": p,
    });
    std::fs::write(&path, text.to_string() + "\n").map_err(|e| Error::io(&path, e))?;
    write_run_json(
        &cfg,
        "compare",
        &[
            ("a", args.a.display().to_string()),
            ("b", args.b.display().to_string()),
        ],
    )?;
    println!(
        "p={p:.6} statistic={statistic:.6} n={} permutations={}",
        a.n, args.permutations
    );
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let cfg = resolve(&args.common, |_| {})?;
    let mut all = Vec::new();
    for input in &args.inputs {
        require_file(input)?;
        all.extend(read_report(input)?);
    }
    prepare_out_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("report.csv");
    write_report(&all, &path)?;
    let inputs = args
        .inputs
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(",");
    write_run_json(&cfg, "report", &[("inputs", inputs)])?;
    println!("rows={} out={}", all.len(), path.display());
    Ok(())
}
