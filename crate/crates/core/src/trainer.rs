//! MLP backbone, SGD and the training loop for the four training modes.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bbs::{mask_from_scores, LabelSpace, MiningSchedule};
use crate::datasim::{BasketSet, Reader};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::ids::NetworkId;
use crate::loss::{
    check_embedding, guarded_norm, masked_loss, masked_loss_scored, Classifier, ColumnScores,
    Embedding, Gradients, LossConfig, Method,
};
use crate::parallel::{parallel_bbs, shard_layout, MaskSource, Mining, ShardLayout};

const SHUFFLE_SALT: u64 = 0x0005_eed0_fba5_ce75;

impl Method {
    /// Methods whose `g` ignores the embedding's magnitude train on
    /// unit-length embeddings.
    pub fn normalizes_embedding(self) -> bool {
        matches!(
            self,
            Method::L2Softmax | Method::NormFace | Method::CosFace | Method::ArcFace
        )
    }
}

/// Fully connected layer, `out × in` row-major weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.biases)
                .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()),
        );
    }
}

/// MLP embedding network: ReLU between layers, none after the last one,
/// optional L2 normalization of the output.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Dense>,
    pub normalize: bool,
}

/// Intermediate activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Last layer output before normalization.
    raw: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl ModelParams {
    /// He-initialized MLP `input → hidden… → embed_dim`.
    pub fn init(
        input: usize,
        hidden: &[usize],
        embed_dim: usize,
        normalize: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if input == 0 || embed_dim == 0 || hidden.contains(&0) {
            return Err(Error::validation("layer widths must be positive"));
        }
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(embed_dim);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (i, o) = (w[0], w[1]);
                let dist = Normal::new(0.0, (2.0 / i as f64).sqrt()).unwrap();
                Dense {
                    inputs: i,
                    outputs: o,
                    weights: (0..i * o).map(|_| dist.sample(rng)).collect(),
                    biases: vec![0.0; o],
                }
            })
            .collect();
        Ok(ModelParams { layers, normalize })
    }

    /// A single identity layer without normalization.
    pub fn identity(dim: usize) -> Self {
        let mut weights = vec![0.0; dim * dim];
        for i in 0..dim {
            weights[i * dim + i] = 1.0;
        }
        ModelParams {
            layers: vec![Dense {
                inputs: dim,
                outputs: dim,
                weights,
                biases: vec![0.0; dim],
            }],
            normalize: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::validation("model has no layers"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return Err(Error::validation(format!("layer {i} has inconsistent shapes")));
            }
            if i > 0 && self.layers[i - 1].outputs != l.inputs {
                return Err(Error::validation(format!("layer {i} does not chain")));
            }
            if l.weights.iter().chain(&l.biases).any(|v| !v.is_finite()) {
                return Err(Error::validation(format!("layer {i} contains NaN or Inf")));
            }
        }
        Ok(())
    }

    pub fn forward_cached(&self, feature: &[f64]) -> Result<ForwardCache> {
        if feature.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: feature.len(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = feature.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = Vec::with_capacity(layer.outputs);
            layer.apply(&cur, &mut next);
            if i < last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            inputs.push(std::mem::replace(&mut cur, next));
        }
        let embedding = if self.normalize {
            let n = guarded_norm(cur.iter().map(|v| v * v).sum());
            cur.iter().map(|v| v / n).collect()
        } else {
            cur.clone()
        };
        Ok(ForwardCache {
            inputs,
            raw: cur,
            embedding,
        })
    }

    /// Accumulates `∂L/∂params` given `∂L/∂embedding`.
    pub fn backward(&self, cache: &ForwardCache, d_embedding: &[f64], grads: &mut ModelParams) {
        let mut delta: Vec<f64> = if self.normalize {
            let n = guarded_norm(cache.raw.iter().map(|v| v * v).sum());
            let y = &cache.embedding;
            let yg: f64 = y.iter().zip(d_embedding).map(|(a, b)| a * b).sum();
            d_embedding
                .iter()
                .zip(y)
                .map(|(g, yi)| (g - yi * yg) / n)
                .collect()
        } else {
            d_embedding.to_vec()
        };
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            let g = &mut grads.layers[i];
            for (o, &dl) in delta.iter().enumerate() {
                if dl == 0.0 {
                    continue;
                }
                g.biases[o] += dl;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (gw, xi) in row.iter_mut().zip(input) {
                    *gw += dl * xi;
                }
            }
            if i == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.inputs];
            for (o, &dl) in delta.iter().enumerate() {
                if dl == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += dl * w;
                }
            }
            // ReLU: the stored input of layer i is the activated output of i-1
            for (p, a) in prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    inputs: l.inputs,
                    outputs: l.outputs,
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
            normalize: self.normalize,
        }
    }

    fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.biases.as_slice()])
    }

    fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.biases.as_mut_slice()])
    }

    pub fn flat(&self) -> Vec<f64> {
        self.slices().flatten().copied().collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        let mut it = values.iter();
        for s in self.slices_mut() {
            for v in s {
                *v = *it.next().expect("flat parameter vector too short");
            }
        }
    }
}

/// Forward pass of one feature vector.
pub fn forward_embed(params: &ModelParams, feature: &[f64]) -> Result<Vec<f64>> {
    Ok(params.forward_cached(feature)?.embedding)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the learning rate is divided by 10.
    pub lr_drop_epochs: Vec<u32>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_drop_epochs: vec![5, 10, 15],
        }
    }
}

/// `lr0 · 10^(−#{drop epochs ≤ epoch})`.
pub fn lr_at(opt: &SgdConfig, epoch: u32) -> f64 {
    let drops = opt.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
    opt.lr0 * 10f64.powi(-(drops as i32))
}

/// Classic momentum with weight decay folded into the gradient:
/// `v ← μ·v + g + λ·w`, `w ← w − lr·v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((w, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *w;
        *w -= lr * *v;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Concatenated baskets, every other class is a negative.
    Baseline1,
    /// One softmax per basket over a shared backbone.
    Baseline2,
    Bbs,
    #[serde(rename = "pbbs")]
    ParallelBbs,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline1, Mode::Baseline2, Mode::Bbs, Mode::ParallelBbs];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline1 => "baseline1",
            Mode::Baseline2 => "baseline2",
            Mode::Bbs => "bbs",
            Mode::ParallelBbs => "pbbs",
        }
    }

    fn mines(self) -> bool {
        matches!(self, Mode::Bbs | Mode::ParallelBbs)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::validation(format!("unknown training mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub mode: Mode,
    /// Minimum ignored count shared by all baskets.
    pub tau: u32,
    /// Ratio drop interval in epochs.
    pub drop_every: u32,
    pub optimizer: SgdConfig,
    pub batch_size: usize,
    pub epochs: u32,
    pub seed: u64,
    /// Shard count for [`Mode::ParallelBbs`].
    pub shards: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    #[serde(default)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossConfig::standard(Method::ArcFace),
            mode: Mode::Bbs,
            tau: 2,
            drop_every: 2,
            optimizer: SgdConfig::default(),
            batch_size: 64,
            epochs: 20,
            seed: 0,
            shards: 1,
            hidden: vec![128],
            embed_dim: 64,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 || self.epochs == 0 || self.embed_dim == 0 {
            return Err(Error::validation("batch size, epochs and embedding size must be positive"));
        }
        if self.tau == 0 || self.drop_every == 0 {
            return Err(Error::validation("tau and drop interval must be positive"));
        }
        if self.mode == Mode::ParallelBbs && self.shards == 0 {
            return Err(Error::validation("parallel mode needs at least one shard"));
        }
        Ok(())
    }

    pub fn schedule(&self, baskets: usize) -> Result<MiningSchedule> {
        MiningSchedule::uniform(self.tau, baskets, self.drop_every, self.epochs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u32,
    pub lr: f64,
    /// Ignored ratio; `None` for modes that do not mine.
    pub ratio: Option<f64>,
    pub mean_loss: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,r,mean_loss,wall_ms\n");
        for e in &self.epochs {
            let r = e.ratio.map(|r| r.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{:.3}\n", e.epoch, e.lr, r, e.mean_loss, e.wall_ms));
        }
        s
    }

    /// Everything except wall-clock time.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.lr.to_bits() == b.lr.to_bits()
                    && a.ratio.map(f64::to_bits) == b.ratio.map(f64::to_bits)
                    && a.mean_loss.to_bits() == b.mean_loss.to_bits()
            })
    }
}

/// Trained backbone and classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Trained {
    pub model: ModelParams,
    pub classifier: Classifier,
    pub log: TrainLog,
}

/// A training sample resolved against the label space.
struct Item {
    feature: Vec<f64>,
    target: NetworkId,
    basket: usize,
}

/// Per-batch loss machinery shared by training and gradient checking.
struct Objective<'a> {
    cfg: &'a LossConfig,
    mode: Mode,
    space: &'a LabelSpace,
    layout: Option<ShardLayout>,
    exec: Exec,
    /// Baseline include masks: all classes, and one per basket.
    all: Vec<bool>,
    per_basket: Vec<Vec<bool>>,
    tau: Vec<u32>,
}

impl<'a> Objective<'a> {
    fn new(cfg: &'a LossConfig, train: &TrainConfig, space: &'a LabelSpace) -> Result<Self> {
        let layout = match train.mode {
            Mode::ParallelBbs => Some(shard_layout(space.total(), train.shards)?),
            _ => None,
        };
        let per_basket = space
            .baskets()
            .map(|k| {
                let r = space.range(k);
                (0..space.total()).map(|j| r.contains(&j)).collect()
            })
            .collect();
        Ok(Objective {
            cfg,
            mode: train.mode,
            space,
            layout,
            exec: train.exec,
            all: vec![true; space.total()],
            per_basket,
            tau: vec![train.tau; space.num_baskets()],
        })
    }

    /// Loss of one sample; adds `scale ·` classifier gradients to `g` and
    /// leaves `scale · ∂L/∂x` in `g.x`.
    fn sample(
        &self,
        clf: &Classifier,
        x: &[f64],
        item: &Item,
        ratio: f64,
        g: &mut Gradients,
        scale: f64,
    ) -> Result<f64> {
        g.x.iter_mut().for_each(|v| *v = 0.0);
        let target = item.target.index();
        match self.mode {
            Mode::Baseline1 => masked_loss(self.cfg, clf, x, target, &self.all, Some((g, scale))),
            Mode::Baseline2 => masked_loss(
                self.cfg,
                clf,
                x,
                target,
                &self.per_basket[item.basket],
                Some((g, scale)),
            ),
            Mode::Bbs => {
                let emb = Embedding::new(x);
                check_embedding(self.cfg.method, &emb)?;
                let scores = ColumnScores::compute(self.cfg, &clf.view(), &emb)?;
                let ignored = self.ignored(ratio);
                let owner = self.space.locate(item.target)?;
                let mask = mask_from_scores(self.space, &scores, owner, &ignored)?;
                masked_loss_scored(self.cfg, clf, &emb, &scores, target, &mask.bits, Some((g, scale)))
            }
            Mode::ParallelBbs => {
                let layout = self.layout.as_ref().expect("layout built for parallel mode");
                let mining = Mining {
                    tau: &self.tau,
                    ratio,
                };
                let owner = self.space.basket_of(target);
                parallel_bbs(
                    layout,
                    self.space,
                    self.cfg,
                    clf,
                    x,
                    item.target,
                    owner,
                    MaskSource::Mine(mining),
                    self.exec,
                    Some((g, scale)),
                )
                .map(|o| o.loss)
            }
        }
    }

    fn ignored(&self, ratio: f64) -> Vec<usize> {
        self.space
            .sizes()
            .iter()
            .zip(&self.tau)
            .map(|(&n, &t)| crate::bbs::ignored_count(n as usize, t as usize, ratio))
            .collect()
    }

    /// Mean loss over `batch`, accumulating mean gradients.
    fn batch(
        &self,
        model: &ModelParams,
        clf: &Classifier,
        items: &[&Item],
        ratio: f64,
        model_grads: &mut ModelParams,
        clf_grads: &mut Gradients,
    ) -> Result<f64> {
        let scale = 1.0 / items.len() as f64;
        let mut total = 0.0;
        for item in items {
            let cache = model.forward_cached(&item.feature)?;
            total += self.sample(clf, &cache.embedding, item, ratio, clf_grads, scale)?;
            model.backward(&cache, &clf_grads.x, model_grads);
        }
        Ok(total * scale)
    }
}

fn resolve_items(data: &BasketSet, space: &LabelSpace) -> Result<Vec<Item>> {
    data.samples()
        .map(|s| {
            Ok(Item {
                feature: s.feature.iter().map(|&v| v as f64).collect(),
                target: space.network_id(s.basket, s.local_label)?,
                basket: s.basket.index(),
            })
        })
        .collect()
}

fn init_classifier(classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> Classifier {
    let dist = Normal::new(0.0, (1.0 / dim as f64).sqrt()).unwrap();
    let weights = (0..classes * dim).map(|_| dist.sample(rng)).collect();
    Classifier::new(dim, weights, vec![0.0; classes]).expect("finite initial weights")
}

fn init(config: &TrainConfig, data: &BasketSet, space: &LabelSpace) -> Result<(ModelParams, Classifier)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = ModelParams::init(
        data.dim,
        &config.hidden,
        config.embed_dim,
        config.loss.method.normalizes_embedding(),
        &mut rng,
    )?;
    let clf = init_classifier(space.total(), config.embed_dim, &mut rng);
    Ok((model, clf))
}

/// Trains a backbone and classifier on the baskets.
///
/// Within a batch the classifier is frozen: masks and gradients use the
/// weights from before the batch's update.
pub fn train(config: &TrainConfig, data: &BasketSet) -> Result<Trained> {
    config.validate()?;
    data.validate()?;
    let space = data.label_space()?;
    let items = resolve_items(data, &space)?;
    if config.batch_size > items.len() {
        return Err(Error::validation(format!(
            "batch size {} exceeds {} samples",
            config.batch_size,
            items.len()
        )));
    }
    let schedule = config.schedule(space.num_baskets())?;
    let (mut model, mut clf) = init(config, data, &space)?;
    let objective = Objective::new(&config.loss, config, &space)?;

    let mut model_grads = model.zeros_like();
    let mut model_vel = model.zeros_like().flat();
    let mut clf_grads = Gradients::zeros(clf.num_classes(), clf.dim());
    let mut w_vel = vec![0.0; clf.weights().len()];
    let mut b_vel = vec![0.0; clf.num_classes()];
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT);
    let opt = &config.optimizer;
    let mut log = TrainLog::default();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let lr = lr_at(opt, epoch);
        let ratio = schedule.ratio(epoch)?;
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Item> = batch.iter().map(|&i| &items[i]).collect();
            model_grads.slices_mut().for_each(|s| s.fill(0.0));
            clf_grads.weights.fill(0.0);
            clf_grads.biases.fill(0.0);
            let loss = objective.batch(&model, &clf, &batch, ratio, &mut model_grads, &mut clf_grads)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch as usize,
                    step: step + 1,
                });
            }
            loss_sum += loss * batch.len() as f64;

            let mut flat = model.flat();
            sgd_step(&mut flat, &model_grads.flat(), &mut model_vel, lr, opt.momentum, opt.weight_decay);
            model.set_flat(&flat);
            sgd_step(clf.weights_mut(), &clf_grads.weights, &mut w_vel, lr, opt.momentum, opt.weight_decay);
            if config.loss.use_bias {
                sgd_step(clf.biases_mut(), &clf_grads.biases, &mut b_vel, lr, opt.momentum, opt.weight_decay);
            }
        }
        log.epochs.push(EpochLog {
            epoch,
            lr,
            ratio: config.mode.mines().then_some(ratio),
            mean_loss: loss_sum / items.len() as f64,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(Trained {
        model,
        classifier: clf,
        log,
    })
}

/// Analytic versus central finite-difference gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub params: usize,
    /// `max |a − n| / max(|a|, |n|, REL_FLOOR)` over every parameter.
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Denominator floor of the relative error, so parameters whose gradient
/// is essentially zero are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks the gradient of the mean loss over the first `batch_size`
/// samples with freshly initialized parameters, for the backbone and the
/// classifier. Mining uses the last epoch's ratio and the mask is held
/// fixed while differencing.
pub fn grad_check(config: &TrainConfig, data: &BasketSet, tolerance: f64) -> Result<GradCheckReport> {
    config.validate()?;
    data.validate()?;
    let space = data.label_space()?;
    let items = resolve_items(data, &space)?;
    let (model, clf) = init(config, data, &space)?;
    grad_check_with(config, &space, &items, model, clf, tolerance)
}

fn grad_check_with(
    config: &TrainConfig,
    space: &LabelSpace,
    items: &[Item],
    mut model: ModelParams,
    mut clf: Classifier,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let n_params =
        model.num_params() + clf.weights().len() + if config.loss.use_bias { clf.num_classes() } else { 0 };
    if n_params > 1000 {
        return Err(Error::validation(format!(
            "gradient check is meant for small instances; {n_params} parameters exceeds 1000"
        )));
    }
    let batch: Vec<&Item> = items.iter().take(config.batch_size.max(1)).collect();
    let ratio = config.schedule(space.num_baskets())?.ratio(config.epochs)?;
    let mut objective = Objective::new(&config.loss, config, space)?;

    // freeze the mined masks by rebuilding them as explicit include sets
    let frozen: Vec<Vec<bool>> = if config.mode.mines() {
        batch
            .iter()
            .map(|item| {
                let x = model.forward_cached(&item.feature)?.embedding;
                let emb = Embedding::new(&x);
                let scores = ColumnScores::compute(&config.loss, &clf.view(), &emb)?;
                let owner = space.locate(item.target)?;
                Ok(mask_from_scores(space, &scores, owner, &objective.ignored(ratio))?.bits)
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    objective.mode = if config.mode.mines() { Mode::Baseline1 } else { config.mode };

    let eval = |model: &ModelParams, clf: &Classifier, grads: Option<(&mut ModelParams, &mut Gradients)>| -> Result<f64> {
        let scale = 1.0 / batch.len() as f64;
        let mut scratch_m = model.zeros_like();
        let mut scratch_c = Gradients::zeros(clf.num_classes(), clf.dim());
        let (mg, cg) = match grads {
            Some((m, c)) => (m, c),
            None => (&mut scratch_m, &mut scratch_c),
        };
        let mut total = 0.0;
        for (i, item) in batch.iter().enumerate() {
            let cache = model.forward_cached(&item.feature)?;
            total += if frozen.is_empty() {
                objective.sample(clf, &cache.embedding, item, ratio, cg, scale)?
            } else {
                cg.x.iter_mut().for_each(|v| *v = 0.0);
                masked_loss(&config.loss, clf, &cache.embedding, item.target.index(), &frozen[i], Some((cg, scale)))?
            };
            model.backward(&cache, &cg.x, mg);
        }
        Ok(total * scale)
    };

    let mut mg = model.zeros_like();
    let mut cg = Gradients::zeros(clf.num_classes(), clf.dim());
    eval(&model, &clf, Some((&mut mg, &mut cg)))?;

    let mut worst: f64 = 0.0;
    let base = model.flat();
    for (i, &a) in mg.flat().iter().enumerate() {
        let mut p = base.clone();
        p[i] = base[i] + FD_STEP;
        model.set_flat(&p);
        let up = eval(&model, &clf, None)?;
        p[i] = base[i] - FD_STEP;
        model.set_flat(&p);
        let down = eval(&model, &clf, None)?;
        worst = worst.max(relative_error(a, (up - down) / (2.0 * FD_STEP)));
    }
    model.set_flat(&base);

    let numeric = |clf: &mut Classifier, get: fn(&mut Classifier) -> &mut [f64], i: usize| -> Result<f64> {
        let orig = get(clf)[i];
        get(clf)[i] = orig + FD_STEP;
        let up = eval(&model, clf, None)?;
        get(clf)[i] = orig - FD_STEP;
        let down = eval(&model, clf, None)?;
        get(clf)[i] = orig;
        Ok((up - down) / (2.0 * FD_STEP))
    };
    for i in 0..cg.weights.len() {
        let n = numeric(&mut clf, Classifier::weights_mut, i)?;
        worst = worst.max(relative_error(cg.weights[i], n));
    }
    if config.loss.use_bias {
        for i in 0..cg.biases.len() {
            let n = numeric(&mut clf, Classifier::biases_mut, i)?;
            worst = worst.max(relative_error(cg.biases[i], n));
        }
    }
    Ok(GradCheckReport {
        params: n_params,
        max_rel_error: worst,
        tolerance,
        passed: worst < tolerance,
    })
}

/// Classifier gradients of a batch through an explicit model, used to
/// compare the training path with the bare loss functions.
pub fn batch_gradients(
    config: &TrainConfig,
    data: &BasketSet,
    model: &ModelParams,
    clf: &Classifier,
    ratio: f64,
) -> Result<(f64, ModelParams, Gradients)> {
    let space = data.label_space()?;
    let items = resolve_items(data, &space)?;
    let batch: Vec<&Item> = items.iter().take(config.batch_size).collect();
    let objective = Objective::new(&config.loss, config, &space)?;
    let mut mg = model.zeros_like();
    let mut cg = Gradients::zeros(clf.num_classes(), clf.dim());
    let loss = objective.batch(model, clf, &batch, ratio, &mut mg, &mut cg)?;
    Ok((loss, mg, cg))
}

pub const MODEL_MAGIC: &[u8; 4] = b"BBSM";
pub const MODEL_VERSION: u32 = 1;

/// Model file: magic, version, layer count, normalize flag, per-layer
/// `(outputs, inputs)`, per-layer f32 weights then biases, then the
/// classifier's class count, dimension, f32 weights and biases. All
/// integers are little-endian u32.
pub fn encode_model(model: &ModelParams, clf: &Classifier) -> Result<Vec<u8>> {
    model.validate()?;
    let mut out = Vec::new();
    let mut put = |v: u32| out.extend_from_slice(&v.to_le_bytes());
    put(MODEL_VERSION);
    put(model.layers.len() as u32);
    put(model.normalize as u32);
    for l in &model.layers {
        put(l.outputs as u32);
        put(l.inputs as u32);
    }
    let mut bytes = MODEL_MAGIC.to_vec();
    bytes.extend_from_slice(&out);
    let mut floats = |vals: &[f64]| {
        for v in vals {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    };
    for l in &model.layers {
        floats(&l.weights);
        floats(&l.biases);
    }
    bytes.extend_from_slice(&(clf.num_classes() as u32).to_le_bytes());
    bytes.extend_from_slice(&(clf.dim() as u32).to_le_bytes());
    for v in clf.weights().iter().chain(clf.biases()) {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(bytes)
}

pub fn decode_model(bytes: &[u8]) -> Result<(ModelParams, Classifier)> {
    let mut r = Reader::new(bytes);
    let magic = r
        .take(4)
        .map_err(|_| Error::BadHeader("file shorter than magic".into()))?;
    if magic != MODEL_MAGIC {
        return Err(Error::BadHeader(format!("magic {magic:?} is not BBSM")));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::BadHeader(format!("unsupported model version {version}")));
    }
    let n = r.u32()? as usize;
    let normalize = r.u32()? != 0;
    let shapes = (0..n)
        .map(|_| Ok((r.u32()? as usize, r.u32()? as usize)))
        .collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(n);
    for (outputs, inputs) in shapes {
        let weights = r.f32s(outputs * inputs)?.into_iter().map(f64::from).collect();
        let biases = r.f32s(outputs)?.into_iter().map(f64::from).collect();
        layers.push(Dense {
            inputs,
            outputs,
            weights,
            biases,
        });
    }
    let model = ModelParams { layers, normalize };
    model.validate()?;
    let classes = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if dim != model.embed_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.embed_dim(),
            found: dim,
        });
    }
    let weights = r.f32s(classes * dim)?.into_iter().map(f64::from).collect();
    let biases = r.f32s(classes)?.into_iter().map(f64::from).collect();
    r.finish()?;
    Ok((model, Classifier::new(dim, weights, biases)?))
}

pub fn save_model(path: impl AsRef<Path>, model: &ModelParams, clf: &Classifier) -> Result<()> {
    let bytes = encode_model(model, clf)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelParams, Classifier)> {
    decode_model(&fs::read(path)?)
}
