//! Random instances and brute-force reference implementations shared by
//! the integration tests.
#![allow(dead_code)]

use bbs_core::bbs::LabelSpace;
use bbs_core::loss::{Classifier, LossConfig, Method};
use bbs_core::{BasketId, LocalId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v = gaussian(rng, n);
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.iter().map(|a| a / norm).collect()
}

pub struct Instance {
    pub space: LabelSpace,
    pub clf: Classifier,
    pub x: Vec<f64>,
    pub owner: (BasketId, LocalId),
}

/// Random label space with 1..=max_baskets baskets of 1..=max_size
/// classes, Gaussian centers and embedding.
pub fn instance(seed: u64, cfg: &LossConfig, max_baskets: usize, max_size: u32, dim: usize) -> Instance {
    let mut r = rng(seed);
    let m = r.gen_range(1..=max_baskets);
    let sizes: Vec<u32> = (0..m).map(|_| r.gen_range(1..=max_size)).collect();
    let space = LabelSpace::new(&sizes).unwrap();
    let cols: Vec<Vec<f64>> = (0..space.total()).map(|_| gaussian(&mut r, dim)).collect();
    let mut clf = Classifier::from_columns(&cols).unwrap();
    if cfg.use_bias {
        for b in clf.biases_mut() {
            *b = 0.3 * r.sample::<f64, _>(StandardNormal);
        }
    }
    let x = gaussian(&mut r, dim);
    let b = r.gen_range(1..=m);
    let l = r.gen_range(1..=sizes[b - 1]);
    Instance {
        space,
        clf,
        x,
        owner: (BasketId(b as u32), LocalId(l)),
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Piecewise `ψ` straight from the angle.
pub fn psi_angle(theta: f64, m: u32) -> f64 {
    let mf = m as f64;
    let mut k = (theta * mf / PI).floor() as i64;
    k = k.clamp(0, m as i64 - 1);
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    sign * (mf * theta).cos() - 2.0 * k as f64
}

/// Target and non-target similarities of each method, from angles.
pub fn f_ref(cfg: &LossConfig, w: &[f64], x: &[f64]) -> f64 {
    let (nw, nx) = (norm(w), norm(x));
    let cos = (dot(w, x) / (nw * nx)).clamp(-1.0, 1.0);
    let theta = cos.acos();
    match cfg.method {
        Method::Softmax => dot(w, x),
        Method::LSoftmax => nw * nx * psi_angle(theta, cfg.margin as u32),
        Method::L2Softmax => nw * cos,
        Method::NormFace => cos,
        Method::SphereFace => nx * psi_angle(theta, cfg.margin as u32),
        Method::CosFace => cos - cfg.margin,
        Method::ArcFace => (theta + cfg.margin).cos(),
    }
}

pub fn g_ref(cfg: &LossConfig, w: &[f64], x: &[f64]) -> f64 {
    let (nw, nx) = (norm(w), norm(x));
    let cos = dot(w, x) / (nw * nx);
    match cfg.method {
        Method::Softmax | Method::LSoftmax => dot(w, x),
        Method::L2Softmax => nw * cos,
        Method::NormFace | Method::CosFace | Method::ArcFace => cos,
        Method::SphereFace => nx * cos,
    }
}

/// `−log(e^{z_y} / (e^{z_y} + Σ e^{z_j}))` by plain summation over the
/// included columns, no max-shift.
pub fn loss_ref(cfg: &LossConfig, clf: &Classifier, x: &[f64], target: usize, include: &[bool]) -> f64 {
    let s = cfg.scale;
    let zy = s * (f_ref(cfg, clf.column(target), x) + clf.biases()[target]);
    let mut denom = zy.exp();
    for j in 0..clf.num_classes() {
        if j != target && include[j] {
            denom += (s * (g_ref(cfg, clf.column(j), x) + clf.biases()[j])).exp();
        }
    }
    -(zy.exp() / denom).ln()
}

pub const FD_STEP: f64 = 1e-6;

/// Central differences of `loss` in every coordinate of `v`.
pub fn fd_grad(v: &[f64], mut loss: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = v.to_vec();
    (0..v.len())
        .map(|i| {
            p[i] = v[i] + FD_STEP;
            let up = loss(&p);
            p[i] = v[i] - FD_STEP;
            let down = loss(&p);
            p[i] = v[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `|a − n| / max(|a|, |n|, 1e-3)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Configurations with moderate scales so finite differences stay sharp.
pub fn moderate(method: Method) -> LossConfig {
    let mut c = LossConfig::standard(method);
    if method.uses_scale() {
        c.scale = c.scale.min(16.0);
    }
    if method == Method::ArcFace {
        c.margin = 0.1;
    }
    c
}

/// Top `d` positions by value, ties to the lower position, via a full sort.
pub fn sorted_top(values: &[f64], d: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    let mut top = idx[..d].to_vec();
    top.sort_unstable();
    top
}
