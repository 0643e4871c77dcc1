//! `bbs`: data generation, basket splitting, training, evaluation,
//! benchmarking and gradient checks from the command line.
//!
//! Exit status is 0 on success, 1 for invalid input and 2 for runtime
//! failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bbs_core::datasim::{
    geometric_probs, load_baskets, overlap_probs, save_baskets, split_dataset, BasketSet,
    SplitSpec,
};
use bbs_core::eval::{evaluate, EvalOptions, Metric, Protocol};
use bbs_core::experiment::{bench, bench_csv, run_experiment, BenchConfig, ExperimentConfig, Generation};
use bbs_core::loss::{LossConfig, Method};
use bbs_core::trainer::{grad_check, load_model, save_model, train, Mode, SgdConfig, TrainConfig};
use bbs_core::{Error, Exec};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bbs", version, about = "Basket-based softmax training over overlapping label sets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic features as single-basket files (training and held-out classes).
    Generate(GenerateArgs),
    /// Split a dataset into baskets with a class multiplicity distribution.
    Split(SplitArgs),
    /// Train a backbone and classifier on a basket file.
    Train(TrainArgs),
    /// Evaluate a trained model on held-out data.
    Eval(EvalArgs),
    /// Measure sharded loss throughput and peak memory.
    Bench(BenchArgs),
    /// Compare analytic and finite-difference gradients on one batch.
    Gradcheck(GradcheckArgs),
    /// Run a JSON-configured generate → split → train → eval pipeline.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Classes used for training.
    #[arg(long, default_value_t = 100)]
    classes: usize,
    /// Additional held-out classes for evaluation.
    #[arg(long, default_value_t = 20)]
    eval_classes: usize,
    /// Samples drawn per class.
    #[arg(long, default_value_t = 20)]
    samples_per_class: usize,
    /// Feature dimension.
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Noise standard deviation around each class center.
    #[arg(long, default_value_t = 0.1)]
    spread: f64,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Basket file for the training classes.
    #[arg(long)]
    output: PathBuf,
    /// Basket file for the held-out classes.
    #[arg(long)]
    eval_output: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    /// Basket file whose samples are re-split (existing baskets are merged).
    #[arg(long)]
    input: PathBuf,
    /// Number of baskets.
    #[arg(long)]
    parts: usize,
    /// Multiplicity probabilities: comma-separated values, `geometric`, or `overlap:R`.
    #[arg(long)]
    probs: String,
    /// Split seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Basket file to write.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    /// Training mode: baseline1, baseline2, bbs or pbbs.
    #[arg(long, default_value = "bbs")]
    mode: Mode,
    /// Loss: softmax, lsoftmax, l2softmax, normface, sphereface, cosface or arcface.
    #[arg(long, default_value = "arcface")]
    loss: Method,
    /// Scale; defaults to the method's customary value.
    #[arg(long)]
    s: Option<f64>,
    /// Margin; defaults to the method's customary value.
    #[arg(long)]
    m: Option<f64>,
    /// Add a per-class bias (methods that allow it).
    #[arg(long)]
    bias: Option<bool>,
    /// Minimum number of mined negatives per basket.
    #[arg(long, default_value_t = 2)]
    tau: u32,
    /// Epochs between ratio drops.
    #[arg(long, default_value_t = 2)]
    tr: u32,
    /// Training epochs.
    #[arg(long, default_value_t = 20)]
    epochs: u32,
    /// Initial learning rate.
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// SGD momentum.
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// L2 weight decay.
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
    /// Epochs at which the learning rate is divided by 10.
    #[arg(long, value_delimiter = ',', default_value = "5,10,15")]
    lr_drops: Vec<u32>,
    /// Mini-batch size.
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Class-center shards for pbbs.
    #[arg(long, default_value_t = 1)]
    shards: usize,
    /// Hidden layer widths, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "128")]
    hidden: Vec<usize>,
    /// Embedding dimension.
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
    /// Run shards one after another instead of on worker threads.
    #[arg(long)]
    sequential: bool,
    /// Initialization and shuffling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ModelArgs {
    fn config(&self) -> Result<TrainConfig, Error> {
        let std = LossConfig::standard(self.loss);
        let loss = LossConfig::new(
            self.loss,
            self.s.unwrap_or(std.scale),
            self.m.unwrap_or(std.margin),
            self.bias.unwrap_or(std.use_bias),
        )?;
        let cfg = TrainConfig {
            loss,
            mode: self.mode,
            tau: self.tau,
            drop_every: self.tr,
            optimizer: SgdConfig {
                lr0: self.lr,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
                lr_drop_epochs: self.lr_drops.clone(),
            },
            batch_size: self.batch,
            epochs: self.epochs,
            seed: self.seed,
            shards: self.shards,
            hidden: self.hidden.clone(),
            embed_dim: self.embed_dim,
            exec: if self.sequential { Exec::Sequential } else { Exec::Threads },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Basket file to train on.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Model file from `train`.
    #[arg(long)]
    model: PathBuf,
    /// Basket file with held-out classes.
    #[arg(long)]
    data: PathBuf,
    /// pairs or retrieval.
    #[arg(long, default_value = "pairs")]
    protocol: Protocol,
    /// False accept rates for TAR@FAR, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "1e-2,1e-3")]
    far: Vec<f64>,
    /// Genuine and impostor pairs sampled each.
    #[arg(long, default_value_t = 3000)]
    pairs: usize,
    /// Retrieval queries drawn per class; the rest form the gallery.
    #[arg(long, default_value_t = 1)]
    queries_per_class: usize,
    /// Score with negative Euclidean distance instead of cosine similarity.
    #[arg(long)]
    euclidean: bool,
    /// Pair and query sampling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Metrics CSV; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Class counts, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "10000,100000")]
    classes: Vec<usize>,
    /// Shard counts, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    shards: Vec<usize>,
    /// Embedding dimension.
    #[arg(long, default_value_t = 128)]
    dim: usize,
    /// Baskets the classes are split into.
    #[arg(long, default_value_t = 2)]
    baskets: usize,
    /// Samples timed per cell.
    #[arg(long, default_value_t = 32)]
    samples: usize,
    /// Seed for centers and samples.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV file; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Basket file; the first batch is checked.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Invalid(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type CliResult = Result<(), Failure>;

fn stage<T>(name: &str, r: Result<T, Error>) -> Result<T, Failure> {
    r.map_err(|e| match Failure::from(e) {
        Failure::Invalid(m) => Failure::Invalid(format!("{name}: {m}")),
        Failure::Runtime(m) => Failure::Runtime(format!("{name}: {m}")),
    })
}

fn write(path: &Path, contents: &str) -> CliResult {
    fs::write(path, contents).map_err(|e| Failure::Runtime(format!("writing {}: {e}", path.display())))
}

fn emit(out: Option<&Path>, contents: &str) -> CliResult {
    match out {
        Some(p) => write(p, contents),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

fn load(path: &Path) -> Result<BasketSet, Failure> {
    input(path, load_baskets(path))
}

// a missing input file is a usage error, other I/O failures are not
fn input<T>(path: &Path, r: Result<T, Error>) -> Result<T, Failure> {
    match r {
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Failure::Invalid(format!("{}: not found", path.display())))
        }
        r => stage(&format!("reading {}", path.display()), r),
    }
}

fn parse_probs(s: &str, parts: usize) -> Result<Vec<f64>, Failure> {
    if s == "geometric" {
        return Ok(geometric_probs(parts)?);
    }
    if let Some(r) = s.strip_prefix("overlap:") {
        let r = r.parse().map_err(|_| Failure::Invalid(format!("bad overlap ratio {r:?}")))?;
        if parts != 2 {
            return Err(Failure::Invalid("overlap:R needs --parts 2".into()));
        }
        return Ok(overlap_probs(r)?);
    }
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| Failure::Invalid(format!("bad probability {v:?}"))))
        .collect()
}

fn generate(a: GenerateArgs) -> CliResult {
    let gen = Generation {
        train_classes: a.classes,
        eval_classes: a.eval_classes,
        samples_per_class: a.samples_per_class,
        dim: a.dim,
        spread: a.spread,
        seed: a.seed,
    };
    let (train_set, eval_set) = gen.generate()?;
    save_baskets(&a.output, &BasketSet::single(&train_set)?)?;
    match (a.eval_output, eval_set.is_empty()) {
        (Some(p), false) => save_baskets(p, &BasketSet::single(&eval_set)?)?,
        (Some(_), true) => return Err(Failure::Invalid("--eval-output needs --eval-classes > 0".into())),
        (None, _) => {}
    }
    Ok(())
}

fn split(a: SplitArgs) -> CliResult {
    let input = load(&a.input)?;
    let spec = SplitSpec::new(a.parts, parse_probs(&a.probs, a.parts)?, a.seed)?;
    let set = split_dataset(&input.to_labeled(), &spec)?;
    save_baskets(&a.output, &set)?;
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let cfg = a.model.config()?;
    let data = load(&a.data)?;
    let trained = train(&cfg, &data)?;
    save_model(&a.out, &trained.model, &trained.classifier)?;
    if let Some(log) = &a.log {
        write(log, &trained.log.to_csv())?;
    }
    if let Some(last) = trained.log.epochs.last() {
        eprintln!("trained {} epochs, final mean loss {:.6}", trained.log.epochs.len(), last.mean_loss);
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> CliResult {
    let (model, _) = input(&a.model, load_model(&a.model))?;
    let data = load(&a.data)?;
    let opts = EvalOptions {
        protocol: a.protocol,
        fars: a.far,
        pairs_per_kind: a.pairs,
        queries_per_class: a.queries_per_class,
        seed: a.seed,
        metric: if a.euclidean { Metric::Euclidean } else { Metric::Cosine },
    };
    let report = evaluate(&model, &data.to_labeled(), &opts)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    emit(a.out.as_deref(), &report.to_csv())
}

fn bench_cmd(a: BenchArgs) -> CliResult {
    let rows = bench(&BenchConfig {
        num_classes: a.classes,
        shards: a.shards,
        dim: a.dim,
        baskets: a.baskets,
        samples: a.samples,
        seed: a.seed,
    })?;
    emit(a.out.as_deref(), &bench_csv(&rows))
}

fn gradcheck_cmd(a: GradcheckArgs) -> CliResult {
    let cfg = a.model.config()?;
    let data = load(&a.data)?;
    let rep = grad_check(&cfg, &data, a.tol)?;
    println!(
        "params={} max_rel_error={:.3e} tolerance={:.1e} passed={}",
        rep.params, rep.max_rel_error, rep.tolerance, rep.passed
    );
    if rep.passed {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("gradient check failed: {:.3e} > {:.1e}", rep.max_rel_error, a.tol)))
    }
}

fn experiment_cmd(a: ExperimentArgs) -> CliResult {
    let text = fs::read_to_string(&a.config)
        .map_err(|e| Failure::Invalid(format!("reading {}: {e}", a.config.display())))?;
    let mut cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| Failure::Invalid(format!("config: {e}")))?;
    if a.out.is_some() {
        cfg.output_dir = a.out;
    }
    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("creating {}: {e}", dir.display())))?;
    }
    let summary = run_experiment(&cfg)?;
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", summary.to_markdown());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Experiment(a) => experiment_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
