//! Unified softmax-family loss with hand-derived gradients.
//!
//! Every supported method is described by a pair of functions of a class
//! center `W` and an embedding `x`: `g`, the similarity used for non-target
//! classes, and `f`, the (possibly margin-penalized) similarity of the
//! target class. The per-sample loss is
//!
//! ```text
//! L = -log( e^{s(f(W_y,x)+b_y)} / (e^{s(f(W_y,x)+b_y)} + sum_{j != y} e^{s(g(W_j,x)+b_j)}) )
//! ```
//!
//! Both `f` and `g` are written in terms of `‖W‖`, `‖x‖` and `cos θ`, so a
//! single chain rule produces the gradients for every method:
//! `∂h/∂x = a·W + bx·x` and `∂h/∂W = a·x + dw·W`.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::NetworkId;

/// Added to squared norms before the square root.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Softmax,
    LSoftmax,
    L2Softmax,
    NormFace,
    SphereFace,
    CosFace,
    ArcFace,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Softmax,
        Method::LSoftmax,
        Method::L2Softmax,
        Method::NormFace,
        Method::SphereFace,
        Method::CosFace,
        Method::ArcFace,
    ];

    pub fn uses_scale(self) -> bool {
        matches!(
            self,
            Method::L2Softmax | Method::NormFace | Method::CosFace | Method::ArcFace
        )
    }

    pub fn allows_bias(self) -> bool {
        matches!(self, Method::Softmax | Method::L2Softmax)
    }

    /// Multiplicative angular margin (`ψ`).
    pub fn has_integer_margin(self) -> bool {
        matches!(self, Method::LSoftmax | Method::SphereFace)
    }

    pub fn has_additive_margin(self) -> bool {
        matches!(self, Method::CosFace | Method::ArcFace)
    }

    /// Whether `g` depends on the angle only.
    pub fn is_cosine(self) -> bool {
        matches!(self, Method::NormFace | Method::CosFace | Method::ArcFace)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Softmax => "softmax",
            Method::LSoftmax => "lsoftmax",
            Method::L2Softmax => "l2softmax",
            Method::NormFace => "normface",
            Method::SphereFace => "sphereface",
            Method::CosFace => "cosface",
            Method::ArcFace => "arcface",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::validation(format!("unknown loss method {s:?}")))
    }
}

/// Method choice plus its hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub method: Method,
    pub scale: f64,
    pub margin: f64,
    pub use_bias: bool,
}

impl LossConfig {
    pub fn new(method: Method, scale: f64, margin: f64, use_bias: bool) -> Result<Self> {
        let cfg = LossConfig {
            method,
            scale,
            margin,
            use_bias,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Customary hyperparameters for each method.
    pub fn standard(method: Method) -> Self {
        let (scale, margin, use_bias) = match method {
            Method::Softmax => (1.0, 0.0, true),
            Method::LSoftmax => (1.0, 2.0, false),
            Method::L2Softmax => (16.0, 0.0, true),
            Method::NormFace => (16.0, 0.0, false),
            Method::SphereFace => (1.0, 4.0, false),
            Method::CosFace => (30.0, 0.35, false),
            Method::ArcFace => (30.0, 0.5, false),
        };
        LossConfig {
            method,
            scale,
            margin,
            use_bias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.method;
        if m.uses_scale() {
            if !(self.scale.is_finite() && self.scale > 0.0) {
                return Err(Error::validation(format!(
                    "{m} needs a positive scale, got {}",
                    self.scale
                )));
            }
        } else if self.scale != 1.0 {
            return Err(Error::validation(format!(
                "{m} does not use a scale; it must be 1, got {}",
                self.scale
            )));
        }
        if self.use_bias && !m.allows_bias() {
            return Err(Error::validation(format!("{m} does not use a bias")));
        }
        if m.has_integer_margin() {
            let ok = self.margin.fract() == 0.0 && (1.0..=4.0).contains(&self.margin);
            if !ok {
                return Err(Error::validation(format!(
                    "{m} margin must be an integer in 1..=4, got {}",
                    self.margin
                )));
            }
        } else if m.has_additive_margin() && !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(Error::validation(format!(
                "{m} margin must be non-negative, got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

/// Class centers stored as contiguous columns, one per network id.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    dim: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl Classifier {
    pub fn new(dim: usize, weights: Vec<f64>, biases: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("classifier dimension must be positive"));
        }
        if weights.len() != dim * biases.len() {
            return Err(Error::validation(format!(
                "weights hold {} values, expected {} classes x {dim}",
                weights.len(),
                biases.len()
            )));
        }
        if biases.is_empty() {
            return Err(Error::validation("classifier needs at least one class"));
        }
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::validation("classifier contains NaN or Inf"));
        }
        Ok(Classifier {
            dim,
            weights,
            biases,
        })
    }

    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let dim = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != dim) {
            return Err(Error::validation("columns differ in length"));
        }
        let weights = columns.concat();
        Classifier::new(dim, weights, vec![0.0; columns.len()])
    }

    pub fn zeros(classes: usize, dim: usize) -> Self {
        Classifier {
            dim,
            weights: vec![0.0; classes * dim],
            biases: vec![0.0; classes],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.biases.len()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.weights[j * self.dim..(j + 1) * self.dim]
    }

    pub fn column_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.weights[j * self.dim..(j + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [f64] {
        &mut self.biases
    }

    /// Copy of the columns in `range` as a standalone classifier.
    pub fn subset(&self, range: Range<usize>) -> Classifier {
        Classifier {
            dim: self.dim,
            weights: self.weights[range.start * self.dim..range.end * self.dim].to_vec(),
            biases: self.biases[range].to_vec(),
        }
    }

    pub fn view(&self) -> ClassifierView<'_> {
        self.view_range(0..self.num_classes())
    }

    pub fn view_range(&self, range: Range<usize>) -> ClassifierView<'_> {
        ClassifierView {
            dim: self.dim,
            start: range.start,
            weights: &self.weights[range.start * self.dim..range.end * self.dim],
            biases: &self.biases[range],
        }
    }
}

/// Borrowed run of consecutive columns `[start, start + len)`.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierView<'a> {
    pub(crate) dim: usize,
    pub(crate) start: usize,
    pub(crate) weights: &'a [f64],
    pub(crate) biases: &'a [f64],
}

impl<'a> ClassifierView<'a> {
    pub fn start(&self) -> usize {
        self.start
    }

    pub fn len(&self) -> usize {
        self.biases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.biases.is_empty()
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len()
    }

    /// Column by global index.
    #[inline]
    pub fn column(&self, j: usize) -> &'a [f64] {
        let k = j - self.start;
        &self.weights[k * self.dim..(k + 1) * self.dim]
    }

    #[inline]
    pub fn bias(&self, j: usize) -> f64 {
        self.biases[j - self.start]
    }
}

/// Gradients of a per-sample loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub x: Vec<f64>,
    /// Same layout as [`Classifier::weights`].
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Gradients {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Gradients {
            x: vec![0.0; dim],
            weights: vec![0.0; classes * dim],
            biases: vec![0.0; classes],
        }
    }

    pub fn weight_column(&self, j: usize) -> &[f64] {
        let d = self.x.len();
        &self.weights[j * d..(j + 1) * d]
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn guarded_norm(sq: f64) -> f64 {
    (sq + NORM_EPS).sqrt()
}

/// Embedding with its guarded norm precomputed.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Embedding<'a> {
    pub x: &'a [f64],
    pub norm: f64,
    pub raw_sq: f64,
}

impl<'a> Embedding<'a> {
    pub fn new(x: &'a [f64]) -> Self {
        let raw_sq = dot(x, x);
        Embedding {
            x,
            norm: guarded_norm(raw_sq),
            raw_sq,
        }
    }
}

/// A similarity value together with its chain-rule coefficients.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub(crate) struct Term {
    pub value: f64,
    /// `∂h/∂x = a·W + bx·x`, `∂h/∂W = a·x + dw·W`.
    pub a: f64,
    pub bx: f64,
    pub dw: f64,
}

/// `ψ(θ) = (-1)^k cos(mθ) - 2k` on `θ ∈ [kπ/m, (k+1)π/m]`, as a function of
/// `c = cos θ`. Returns `(ψ, dψ/dc)`.
pub(crate) fn psi(c: f64, m: u32) -> (f64, f64) {
    let c = c.clamp(-1.0, 1.0);
    let theta = c.acos();
    let mf = m as f64;
    // boundary ties go to the lower segment
    let k = ((theta * mf / PI).ceil() as i64 - 1).clamp(0, m as i64 - 1);
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    // cos(mθ) = T_m(c), d/dc T_m(c) = m·U_{m-1}(c)
    let (mut t_prev, mut t) = (1.0, c);
    let (mut u_prev, mut u) = (0.0, 1.0);
    for _ in 1..m {
        (t_prev, t) = (t, 2.0 * c * t - t_prev);
        (u_prev, u) = (u, 2.0 * c * u - u_prev);
    }
    (sign * t - 2.0 * k as f64, sign * mf * u)
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum Role {
    Target,
    Other,
}

fn check_norm(sq: f64, what: &'static str) -> Result<()> {
    if sq < NORM_EPS || !sq.is_finite() {
        Err(Error::Domain { what })
    } else {
        Ok(())
    }
}

/// Checks the embedding's norm for methods that normalize it.
pub(crate) fn check_embedding(method: Method, x: &Embedding<'_>) -> Result<()> {
    if method == Method::Softmax {
        Ok(())
    } else {
        check_norm(x.raw_sq, "embedding x")
    }
}

/// Evaluates `f` (target) or `g` (other) without bias, with gradient
/// coefficients. The embedding is assumed already checked.
pub(crate) fn term(cfg: &LossConfig, w: &[f64], x: &Embedding<'_>, role: Role) -> Result<Term> {
    let d = dot(w, x.x);
    let method = cfg.method;
    if method == Method::Softmax || (method == Method::LSoftmax && role == Role::Other) {
        return Ok(Term {
            value: d,
            a: 1.0,
            bx: 0.0,
            dw: 0.0,
        });
    }
    let w_sq = dot(w, w);
    if method != Method::L2Softmax {
        check_norm(w_sq, "class center W")?;
    }
    let nw = guarded_norm(w_sq);
    let nx = x.norm;
    let c = d / (nw * nx);
    // h and its partials with respect to ‖W‖, ‖x‖ and cos θ
    let (h, h_nw, h_nx, h_c) = match (method, role) {
        (Method::Softmax, _) => unreachable!(),
        (Method::LSoftmax, _) => {
            let (p, dp) = psi(c, cfg.margin as u32);
            (nw * nx * p, nx * p, nw * p, nw * nx * dp)
        }
        (Method::L2Softmax, _) => (nw * c, c, 0.0, nw),
        (Method::NormFace, _) | (Method::CosFace, Role::Other) | (Method::ArcFace, Role::Other) => {
            (c, 0.0, 0.0, 1.0)
        }
        (Method::SphereFace, Role::Other) => (nx * c, 0.0, c, nx),
        (Method::SphereFace, Role::Target) => {
            let (p, dp) = psi(c, cfg.margin as u32);
            (nx * p, 0.0, p, nx * dp)
        }
        (Method::CosFace, Role::Target) => (c - cfg.margin, 0.0, 0.0, 1.0),
        (Method::ArcFace, Role::Target) => {
            let cc = c.clamp(-1.0, 1.0);
            let sin_t = (1.0 - cc * cc).max(0.0).sqrt();
            let (sin_m, cos_m) = cfg.margin.sin_cos();
            let value = cc * cos_m - sin_t * sin_m;
            let slope = if sin_t > 1e-12 && c.abs() <= 1.0 {
                cos_m + cc * sin_m / sin_t
            } else {
                cos_m
            };
            (value, 0.0, 0.0, slope)
        }
    };
    let inv = 1.0 / (nw * nx);
    Ok(Term {
        value: h,
        a: h_c * inv,
        bx: h_nx / nx - h_c * c / (nx * nx),
        dw: h_nw / nw - h_c * c / (nw * nw),
    })
}

/// `g(W, x) + b` for the configured method.
pub fn similarity_g(cfg: &LossConfig, w: &[f64], b: f64, x: &[f64]) -> Result<f64> {
    check_lengths(w.len(), x.len())?;
    let emb = Embedding::new(x);
    check_embedding(cfg.method, &emb)?;
    Ok(term(cfg, w, &emb, Role::Other)?.value + b)
}

/// `f(W, x) + b` for the configured method.
pub fn target_f(cfg: &LossConfig, w: &[f64], b: f64, x: &[f64]) -> Result<f64> {
    check_lengths(w.len(), x.len())?;
    let emb = Embedding::new(x);
    check_embedding(cfg.method, &emb)?;
    Ok(term(cfg, w, &emb, Role::Target)?.value + b)
}

fn check_lengths(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        Err(Error::DimensionMismatch { expected, found })
    } else {
        Ok(())
    }
}

/// Running `max` and `Σ exp(z - max)` over a set of logits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Partial {
    pub max: f64,
    pub sum: f64,
}

impl Partial {
    pub const EMPTY: Partial = Partial {
        max: f64::NEG_INFINITY,
        sum: 0.0,
    };

    /// Logits equal to `-inf` are skipped.
    pub fn from_logits(logits: &[f64]) -> Partial {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Partial::EMPTY;
        }
        let sum = logits
            .iter()
            .filter(|z| **z != f64::NEG_INFINITY)
            .map(|z| (z - max).exp())
            .sum();
        Partial { max, sum }
    }
}

/// Global normalizer of the softmax after gathering all partial sums.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Normalizer {
    pub max: f64,
    pub total: f64,
    pub target_logit: f64,
}

impl Normalizer {
    /// Combines the target logit with partials in the given order.
    pub fn gather<'p>(target_logit: f64, partials: impl IntoIterator<Item = &'p Partial>) -> Self {
        let partials: Vec<&Partial> = partials.into_iter().collect();
        let max = partials
            .iter()
            .map(|p| p.max)
            .fold(target_logit, f64::max);
        let mut total = (target_logit - max).exp();
        for p in partials {
            if p.sum > 0.0 {
                total += p.sum * (p.max - max).exp();
            }
        }
        Normalizer {
            max,
            total,
            target_logit,
        }
    }

    pub fn loss(&self) -> f64 {
        self.max + self.total.ln() - self.target_logit
    }

    /// `∂L/∂z` for a non-target logit.
    #[inline]
    pub fn prob(&self, z: f64) -> f64 {
        (z - self.max).exp() / self.total
    }
}

/// Scores of every column in a view: similarity `g` (no bias) and the
/// gradient coefficients of `g`.
#[derive(Clone, Debug)]
pub(crate) struct ColumnScores {
    pub start: usize,
    pub terms: Vec<Term>,
}

impl ColumnScores {
    pub fn compute(cfg: &LossConfig, view: &ClassifierView<'_>, x: &Embedding<'_>) -> Result<Self> {
        let terms = view
            .range()
            .map(|j| term(cfg, view.column(j), x, Role::Other))
            .collect::<Result<Vec<_>>>()?;
        Ok(ColumnScores {
            start: view.start,
            terms,
        })
    }

    #[inline]
    pub fn sim(&self, j: usize) -> f64 {
        self.terms[j - self.start].value
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.terms.len()
    }

    /// Logits `s(g + b)` of included non-target columns; `-inf` elsewhere.
    pub fn masked_logits(
        &self,
        cfg: &LossConfig,
        view: &ClassifierView<'_>,
        include: &[bool],
        target: usize,
    ) -> Vec<f64> {
        self.range()
            .zip(include)
            .map(|(j, &keep)| {
                if keep && j != target {
                    cfg.scale * (self.sim(j) + view.bias(j))
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect()
    }
}

/// Target logit `s(f + b)` and its term.
pub(crate) fn target_term(
    cfg: &LossConfig,
    clf: &Classifier,
    x: &Embedding<'_>,
    target: usize,
) -> Result<(f64, Term)> {
    let t = term(cfg, clf.column(target), x, Role::Target)?;
    Ok((cfg.scale * (t.value + clf.biases()[target]), t))
}

/// Adds the gradient contribution `coef · ∂h/∂(x, W_j, b_j)` of one column.
#[inline]
pub(crate) fn push_column_grad(
    cfg: &LossConfig,
    w: &[f64],
    x: &[f64],
    t: &Term,
    coef: f64,
    gx_w: &mut [f64],
    gx_x: &mut f64,
    gw: &mut [f64],
    gb: &mut f64,
) {
    let c = coef * cfg.scale;
    if c == 0.0 {
        return;
    }
    let ca = c * t.a;
    for (g, wi) in gx_w.iter_mut().zip(w) {
        *g += ca * wi;
    }
    *gx_x += c * t.bx;
    let cdw = c * t.dw;
    for ((g, xi), wi) in gw.iter_mut().zip(x).zip(w) {
        *g += ca * xi + cdw * wi;
    }
    if cfg.use_bias {
        *gb += c;
    }
}

/// Accumulates `scale ·` gradients of the non-target terms in one view.
///
/// `gw` and `gb` cover exactly the view's columns. The `x` gradient is
/// returned as a vector since each shard reports its own contribution.
pub(crate) fn range_grads(
    cfg: &LossConfig,
    view: &ClassifierView<'_>,
    x: &Embedding<'_>,
    scores: &ColumnScores,
    logits: &[f64],
    norm: &Normalizer,
    scale: f64,
    gw: &mut [f64],
    gb: &mut [f64],
) -> Vec<f64> {
    let d = view.dim;
    let mut gx = vec![0.0; d];
    let mut gx_x = 0.0;
    for (k, (&z, t)) in logits.iter().zip(&scores.terms).enumerate() {
        if z == f64::NEG_INFINITY {
            continue;
        }
        let j = view.start + k;
        push_column_grad(
            cfg,
            view.column(j),
            x.x,
            t,
            scale * norm.prob(z),
            &mut gx,
            &mut gx_x,
            &mut gw[k * d..(k + 1) * d],
            &mut gb[k],
        );
    }
    for (g, xi) in gx.iter_mut().zip(x.x) {
        *g += gx_x * xi;
    }
    gx
}

/// Full evaluation of a masked loss on a single (unsharded) classifier.
/// `include[j]` selects which non-target columns enter the denominator.
pub(crate) fn masked_loss(
    cfg: &LossConfig,
    clf: &Classifier,
    x: &[f64],
    target: usize,
    include: &[bool],
    grads: Option<(&mut Gradients, f64)>,
) -> Result<f64> {
    check_lengths(clf.dim(), x.len())?;
    if target >= clf.num_classes() {
        return Err(Error::validation(format!(
            "target class {} outside 1..={}",
            target + 1,
            clf.num_classes()
        )));
    }
    let emb = Embedding::new(x);
    check_embedding(cfg.method, &emb)?;
    let view = clf.view();
    let scores = ColumnScores::compute(cfg, &view, &emb)?;
    masked_loss_scored(cfg, clf, &emb, &scores, target, include, grads)
}

/// Same as [`masked_loss`] with the column scores already computed.
pub(crate) fn masked_loss_scored(
    cfg: &LossConfig,
    clf: &Classifier,
    emb: &Embedding<'_>,
    scores: &ColumnScores,
    target: usize,
    include: &[bool],
    grads: Option<(&mut Gradients, f64)>,
) -> Result<f64> {
    let view = clf.view();
    let logits = scores.masked_logits(cfg, &view, include, target);
    let partial = Partial::from_logits(&logits);
    let (target_logit, target_t) = target_term(cfg, clf, emb, target)?;
    let norm = Normalizer::gather(target_logit, [&partial]);
    if let Some((g, scale)) = grads {
        let gx = range_grads(
            cfg,
            &view,
            emb,
            scores,
            &logits,
            &norm,
            scale,
            &mut g.weights,
            &mut g.biases,
        );
        for (a, b) in g.x.iter_mut().zip(&gx) {
            *a += b;
        }
        add_target_grad(cfg, clf, emb, target, &target_t, &norm, scale, g);
    }
    Ok(norm.loss())
}

pub(crate) fn add_target_grad(
    cfg: &LossConfig,
    clf: &Classifier,
    emb: &Embedding<'_>,
    target: usize,
    t: &Term,
    norm: &Normalizer,
    scale: f64,
    g: &mut Gradients,
) {
    let d = clf.dim();
    let coef = scale * (norm.prob(norm.target_logit) - 1.0);
    let mut gx = vec![0.0; d];
    let mut gx_x = 0.0;
    push_column_grad(
        cfg,
        clf.column(target),
        emb.x,
        t,
        coef,
        &mut gx,
        &mut gx_x,
        &mut g.weights[target * d..(target + 1) * d],
        &mut g.biases[target],
    );
    for ((a, b), xi) in g.x.iter_mut().zip(&gx).zip(emb.x) {
        *a += b + gx_x * xi;
    }
}

/// Per-sample unified loss over every class of `clf`.
pub fn unified_loss(cfg: &LossConfig, clf: &Classifier, x: &[f64], y: NetworkId) -> Result<f64> {
    let target = checked_target(clf, y)?;
    let include = vec![true; clf.num_classes()];
    masked_loss(cfg, clf, x, target, &include, None)
}

/// Gradients of [`unified_loss`] with respect to the embedding, the
/// class centers and the biases (zero when biases are unused).
pub fn unified_loss_grad(
    cfg: &LossConfig,
    clf: &Classifier,
    x: &[f64],
    y: NetworkId,
) -> Result<Gradients> {
    let target = checked_target(clf, y)?;
    let include = vec![true; clf.num_classes()];
    let mut g = Gradients::zeros(clf.num_classes(), clf.dim());
    masked_loss(cfg, clf, x, target, &include, Some((&mut g, 1.0)))?;
    Ok(g)
}

pub(crate) fn checked_target(clf: &Classifier, y: NetworkId) -> Result<usize> {
    if y.0 == 0 || y.0 as usize > clf.num_classes() {
        return Err(Error::validation(format!(
            "class {y} outside 1..={}",
            clf.num_classes()
        )));
    }
    Ok(y.index())
}
