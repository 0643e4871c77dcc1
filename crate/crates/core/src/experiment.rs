//! Experiment pipelines (generate, split, train every mode, evaluate) and
//! the sharded throughput benchmark.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bbs::LabelSpace;
use crate::datasim::{
    gen_synthetic, geometric_probs, mean_pairwise_overlap, overlap_probs, save_baskets, split_dataset,
    LabeledSample, SplitSpec,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::exec::Exec;
use crate::ids::NetworkId;
use crate::loss::{Classifier, Gradients, LossConfig, Method};
use crate::parallel::{parallel_bbs, shard_layout, MaskSource, Mining};
use crate::trainer::{save_model, train, Mode, TrainConfig};

/// Synthetic data: the first `train_classes` classes are split into
/// baskets, the remaining `eval_classes` are held out for evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub train_classes: usize,
    pub eval_classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub seed: u64,
}

impl Generation {
    pub fn generate(&self) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
        let all = gen_synthetic(
            self.train_classes + self.eval_classes,
            self.samples_per_class,
            self.dim,
            self.spread,
            self.seed,
        )?;
        Ok(all
            .into_iter()
            .partition(|s| s.global_class as usize <= self.train_classes))
    }
}

/// Multiplicity distribution of a split, written in JSON as
/// `{"overlap": 0.5}`, `"geometric"` or `{"explicit": [0.7, 0.3]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Probs {
    Overlap(f64),
    Geometric,
    Explicit(Vec<f64>),
}

impl Probs {
    pub fn resolve(&self, parts: usize) -> Result<Vec<f64>> {
        match self {
            Probs::Overlap(r) if parts == 2 => overlap_probs(*r),
            Probs::Overlap(_) => Err(Error::validation("overlap splits need exactly two parts")),
            Probs::Geometric => geometric_probs(parts),
            Probs::Explicit(p) => Ok(p.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSetting {
    pub label: String,
    pub parts: usize,
    pub probs: Probs,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub generation: Generation,
    pub splits: Vec<SplitSetting>,
    pub modes: Vec<Mode>,
    /// Template; `mode` and `seed` are overridden per run.
    pub train: TrainConfig,
    /// Training seeds; reported metrics are medians over them.
    pub seeds: Vec<u64>,
    pub eval: EvalOptions,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.splits.is_empty() || self.modes.is_empty() || self.seeds.is_empty() {
            return Err(Error::validation("experiment needs splits, modes and seeds"));
        }
        self.train.validate()?;
        for s in &self.splits {
            SplitSpec::new(s.parts, s.probs.resolve(s.parts)?, s.seed)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub split: String,
    pub mode: Mode,
    /// Mean pairwise Jaccard overlap of the split actually produced.
    pub overlap: f64,
    /// Metric medians over seeds, in the evaluation report's order.
    pub metrics: Vec<(String, f64)>,
    pub train_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub warnings: Vec<String>,
}

impl Summary {
    pub fn metric(&self, split: &str, mode: Mode, name: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.split == split && r.mode == mode)?
            .metrics
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, v)| v)
    }

    fn metric_names(&self) -> Vec<String> {
        self.rows
            .first()
            .map(|r| r.metrics.iter().map(|(n, _)| n.clone()).collect())
            .unwrap_or_default()
    }

    pub fn to_csv(&self) -> String {
        let names = self.metric_names();
        let mut s = format!("split,mode,overlap,{}\n", names.join(","));
        for r in &self.rows {
            let vals: Vec<String> = r.metrics.iter().map(|(_, v)| format!("{v:.6}")).collect();
            s.push_str(&format!("{},{},{:.4},{}\n", r.split, r.mode, r.overlap, vals.join(",")));
        }
        s
    }

    /// Percentages, one row per (split, mode).
    pub fn to_markdown(&self) -> String {
        let names = self.metric_names();
        let mut s = format!("| split | mode | overlap | {} |\n", names.join(" | "));
        s.push_str(&format!("|---|---|---|{}\n", "---|".repeat(names.len())));
        for r in &self.rows {
            let vals: Vec<String> = r.metrics.iter().map(|(_, v)| format!("{:.2}", v * 100.0)).collect();
            s.push_str(&format!("| {} | {} | {:.3} | {} |\n", r.split, r.mode, r.overlap, vals.join(" | ")));
        }
        s
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Validation(m) => Error::Validation(format!("{name}: {m}")),
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{name}: {io}"))),
        other => other,
    })
}

/// Runs every (split, mode, seed) combination. Artifacts go under
/// `output_dir` when it is set.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Summary> {
    stage("config", config.validate())?;
    let (train_data, eval_data) = stage("generate", config.generation.generate())?;
    if let Some(dir) = &config.output_dir {
        stage("output", fs::create_dir_all(dir).map_err(Error::from))?;
    }
    let mut summary = Summary::default();
    for setting in &config.splits {
        let probs = stage("split", setting.probs.resolve(setting.parts))?;
        let spec = stage("split", SplitSpec::new(setting.parts, probs, setting.seed))?;
        let set = stage("split", split_dataset(&train_data, &spec))?;
        if let Some(dir) = &config.output_dir {
            stage("split", save_baskets(dir.join(format!("{}.bbs", setting.label)), &set))?;
        }
        let overlap = mean_pairwise_overlap(&set);
        for &mode in &config.modes {
            let started = Instant::now();
            let mut per_seed: Vec<Vec<(String, f64)>> = Vec::new();
            for &seed in &config.seeds {
                let cfg = TrainConfig {
                    mode,
                    seed,
                    ..config.train.clone()
                };
                let trained = stage("train", train(&cfg, &set))?;
                let report = stage("eval", evaluate(&trained.model, &eval_data, &config.eval))?;
                for w in report.warnings {
                    if !summary.warnings.contains(&w) {
                        summary.warnings.push(w);
                    }
                }
                if let Some(dir) = &config.output_dir {
                    let stem = format!("{}-{}-{seed}", setting.label, mode);
                    let model_path = dir.join(format!("{stem}.bbsm"));
                    stage("train", save_model(model_path, &trained.model, &trained.classifier))?;
                    let log_path = dir.join(format!("{stem}.log.csv"));
                    stage("train", fs::write(log_path, trained.log.to_csv()).map_err(Error::from))?;
                }
                per_seed.push(report.rows);
            }
            let metrics = per_seed[0]
                .iter()
                .enumerate()
                .map(|(i, (name, _))| (name.clone(), median(per_seed.iter().map(|r| r[i].1).collect())))
                .collect();
            summary.rows.push(SummaryRow {
                split: setting.label.clone(),
                mode,
                overlap,
                metrics,
                train_seconds: started.elapsed().as_secs_f64(),
            });
        }
    }
    if let Some(dir) = &config.output_dir {
        stage("summary", write_summary(dir, &summary))?;
    }
    Ok(summary)
}

fn write_summary(dir: &Path, summary: &Summary) -> Result<()> {
    fs::write(dir.join("summary.csv"), summary.to_csv())?;
    fs::write(dir.join("summary.md"), summary.to_markdown())?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub num_classes: Vec<usize>,
    pub shards: Vec<usize>,
    pub dim: usize,
    /// Baskets the classes are split into, equally sized.
    pub baskets: usize,
    /// Samples timed per cell.
    pub samples: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            num_classes: vec![10_000, 100_000],
            shards: vec![1, 2, 4, 8],
            dim: 128,
            baskets: 2,
            samples: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub num_classes: usize,
    pub shards: usize,
    /// `None` when the cell could not run, with the reason in `error`.
    pub images_per_second: Option<f64>,
    pub peak_resident_bytes: Option<u64>,
    pub error: Option<String>,
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("num_classes,G,images_per_second,peak_resident_bytes,error\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.num_classes,
            r.shards,
            r.images_per_second.map(|v| format!("{v:.3}")).unwrap_or_default(),
            r.peak_resident_bytes.map(|v| v.to_string()).unwrap_or_default(),
            r.error.clone().unwrap_or_default()
        ));
    }
    s
}

/// Peak resident set size of this process, from `/proc/self/status`.
pub fn peak_resident_bytes() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Resets the peak counter so each cell reports its own high-water mark.
fn reset_peak() {
    let _ = fs::write("/proc/self/clear_refs", "5");
}

fn try_vec(len: usize, what: &str) -> Result<Vec<f64>> {
    let mut v = Vec::new();
    v.try_reserve_exact(len)
        .map_err(|_| Error::validation(format!("cannot allocate {what} ({len} values)")))?;
    Ok(v)
}

/// Forward and backward passes of the sharded loss, one sample at a time,
/// on `G` worker threads. Cells whose buffers cannot be allocated are
/// reported and skipped.
pub fn bench(config: &BenchConfig) -> Result<Vec<BenchRow>> {
    if config.dim == 0 || config.baskets == 0 || config.samples == 0 {
        return Err(Error::validation("dimension, baskets and samples must be positive"));
    }
    let mut sizes = config.num_classes.clone();
    sizes.sort_unstable();
    let mut rows = Vec::new();
    for &l in &sizes {
        for &g in &config.shards {
            reset_peak();
            let row = match bench_cell(config, l, g) {
                Ok(ips) => BenchRow {
                    num_classes: l,
                    shards: g,
                    images_per_second: Some(ips),
                    peak_resident_bytes: peak_resident_bytes(),
                    error: None,
                },
                Err(e) => BenchRow {
                    num_classes: l,
                    shards: g,
                    images_per_second: None,
                    peak_resident_bytes: None,
                    error: Some(e.to_string()),
                },
            };
            rows.push(row);
        }
    }
    Ok(rows)
}

fn bench_cell(config: &BenchConfig, classes: usize, shards: usize) -> Result<f64> {
    if classes < config.baskets {
        return Err(Error::validation("fewer classes than baskets"));
    }
    let d = config.dim;
    let base = classes / config.baskets;
    let sizes: Vec<u32> = (0..config.baskets)
        .map(|k| (base + usize::from(k < classes % config.baskets)) as u32)
        .collect();
    let space = LabelSpace::new(&sizes)?;
    let layout = shard_layout(classes, shards)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut weights = try_vec(classes * d, "weights")?;
    weights.extend((0..classes * d).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
    let clf = Classifier::new(d, weights, vec![0.0; classes])?;
    let mut grads = Gradients {
        x: vec![0.0; d],
        weights: try_vec(classes * d, "gradients")?,
        biases: vec![0.0; classes],
    };
    grads.weights.resize(classes * d, 0.0);
    let xs: Vec<Vec<f64>> = (0..config.samples)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let cfg = LossConfig::standard(Method::ArcFace);
    let tau = vec![2u32; config.baskets];
    let run = move || -> Result<()> {
        for (i, x) in xs.iter().enumerate() {
            let y = NetworkId::from_index(i * 7919 % classes);
            let owner = space.basket_of(y.index());
            let mining = Mining { tau: &tau, ratio: 0.5 };
            parallel_bbs(
                &layout,
                &space,
                &cfg,
                &clf,
                x,
                y,
                owner,
                MaskSource::Mine(mining),
                Exec::Threads,
                Some((&mut grads, 1.0)),
            )?;
        }
        Ok(())
    };
    let started = Instant::now();
    in_pool(shards, run)?;
    Ok(config.samples as f64 / started.elapsed().as_secs_f64())
}

#[cfg(feature = "parallel")]
fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::validation(format!("thread pool: {e}")))?;
    pool.install(f)
}

#[cfg(not(feature = "parallel"))]
fn in_pool<T: Send>(_threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    f()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn probs_resolve() {
        assert_eq!(Probs::Overlap(0.5).resolve(2).unwrap(), vec![0.5, 0.5]);
        assert!(Probs::Overlap(0.5).resolve(3).is_err());
        assert_eq!(Probs::Geometric.resolve(4).unwrap().len(), 4);
        assert!(Probs::Explicit(vec![0.2, 0.2]).resolve(2).is_ok());
    }

    #[test]
    fn bench_reports_every_cell() {
        let cfg = BenchConfig {
            num_classes: vec![40, 20],
            shards: vec![1, 2],
            dim: 4,
            baskets: 2,
            samples: 3,
            seed: 1,
        };
        let rows = bench(&cfg).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].num_classes, 20);
        assert!(rows.iter().all(|r| r.images_per_second.unwrap() > 0.0));
        assert!(bench_csv(&rows).starts_with("num_classes,G,"));
    }
}
