//! Basket label space, negative-class mining and the basket-based softmax.
//!
//! Each basket keeps its own local labels `1..=N_m`. Concatenating the
//! baskets in order gives the network ids `1..=L_M` used by the shared
//! classifier. For a sample from basket `m`, every other class of basket `m`
//! is a negative; classes of other baskets are negatives only when the mask
//! allows it. Mining zeroes the `d_k` most similar classes of each other
//! basket, because one of them may be the same identity under another label.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{BasketId, LocalId, NetworkId};
use crate::loss::{
    check_embedding, masked_loss, Classifier, ColumnScores, Embedding, Gradients, LossConfig,
};
use crate::select::top_d;

/// Slack applied before rounding `N·r` up, so that products such as
/// `30 · 0.1` do not round to 4.
const COUNT_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    sizes: Vec<u32>,
    offsets: Vec<usize>,
    total: usize,
}

impl LabelSpace {
    pub fn new(basket_sizes: &[u32]) -> Result<Self> {
        if basket_sizes.is_empty() {
            return Err(Error::validation("label space needs at least one basket"));
        }
        if let Some(k) = basket_sizes.iter().position(|&n| n == 0) {
            return Err(Error::validation(format!("basket {} has no classes", k + 1)));
        }
        let mut offsets = Vec::with_capacity(basket_sizes.len());
        let mut total = 0usize;
        for &n in basket_sizes {
            offsets.push(total);
            total += n as usize;
        }
        Ok(LabelSpace {
            sizes: basket_sizes.to_vec(),
            offsets,
            total,
        })
    }

    pub fn num_baskets(&self) -> usize {
        self.sizes.len()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn sizes(&self) -> &[u32] {
        &self.sizes
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn baskets(&self) -> impl Iterator<Item = BasketId> {
        (0..self.sizes.len()).map(BasketId::from_index)
    }

    pub fn size(&self, basket: BasketId) -> usize {
        self.sizes[basket.index()] as usize
    }

    /// Zero-based column range of a basket.
    pub fn range(&self, basket: BasketId) -> Range<usize> {
        let k = basket.index();
        self.offsets[k]..self.offsets[k] + self.sizes[k] as usize
    }

    pub fn check_basket(&self, basket: BasketId) -> Result<()> {
        if basket.0 == 0 || basket.0 as usize > self.sizes.len() {
            return Err(Error::validation(format!(
                "basket {basket} outside 1..={}",
                self.sizes.len()
            )));
        }
        Ok(())
    }

    pub fn network_id(&self, basket: BasketId, local: LocalId) -> Result<NetworkId> {
        self.check_basket(basket)?;
        let n = self.size(basket);
        if local.0 == 0 || local.0 as usize > n {
            return Err(Error::validation(format!(
                "local label {local} outside 1..={n} of basket {basket}"
            )));
        }
        Ok(NetworkId((self.offsets[basket.index()] + local.0 as usize) as u32))
    }

    /// Inverse of [`network_id`](Self::network_id).
    pub fn locate(&self, id: NetworkId) -> Result<(BasketId, LocalId)> {
        if id.0 == 0 || id.0 as usize > self.total {
            return Err(Error::validation(format!(
                "network id {id} outside 1..={}",
                self.total
            )));
        }
        let j = id.index();
        let k = self.offsets.partition_point(|&o| o <= j) - 1;
        Ok((
            BasketId::from_index(k),
            LocalId::from_index(j - self.offsets[k]),
        ))
    }

    /// Basket containing a zero-based column.
    pub fn basket_of(&self, column: usize) -> BasketId {
        BasketId::from_index(self.offsets.partition_point(|&o| o <= column) - 1)
    }
}

/// Indicator over all network ids of which classes enter the denominator
/// for one sample.
///
/// The target's own bit is always 0; the target enters through the margin
/// term instead.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeMask {
    pub bits: Vec<bool>,
    pub owner: (BasketId, LocalId),
}

impl NegativeMask {
    /// Every other class is a negative (concatenated training).
    pub fn all_ones(space: &LabelSpace, owner: (BasketId, LocalId)) -> Result<Self> {
        let y = space.network_id(owner.0, owner.1)?;
        let mut bits = vec![true; space.total()];
        bits[y.index()] = false;
        Ok(NegativeMask { bits, owner })
    }

    /// Only the owner's basket contributes negatives (multi-task training).
    pub fn all_zeros(space: &LabelSpace, owner: (BasketId, LocalId)) -> Result<Self> {
        let y = space.network_id(owner.0, owner.1)?;
        let mut bits = vec![false; space.total()];
        for j in space.range(owner.0) {
            bits[j] = true;
        }
        bits[y.index()] = false;
        Ok(NegativeMask { bits, owner })
    }

    /// Number of cleared bits outside the owner's basket.
    pub fn cross_basket_zeros(&self, space: &LabelSpace) -> usize {
        let own = space.range(self.owner.0);
        self.bits
            .iter()
            .enumerate()
            .filter(|(j, &b)| !b && !own.contains(j))
            .count()
    }
}

/// Controls how many of the most similar classes per basket are ignored.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningSchedule {
    /// Minimum ignored count per basket.
    pub tau: Vec<u32>,
    /// Ratio drops every this many epochs.
    pub drop_every: u32,
    pub total_epochs: u32,
}

impl MiningSchedule {
    pub fn new(tau: Vec<u32>, drop_every: u32, total_epochs: u32) -> Result<Self> {
        let s = MiningSchedule {
            tau,
            drop_every,
            total_epochs,
        };
        s.validate()?;
        Ok(s)
    }

    /// Same `τ` for each of `baskets` baskets.
    pub fn uniform(tau: u32, baskets: usize, drop_every: u32, total_epochs: u32) -> Result<Self> {
        MiningSchedule::new(vec![tau; baskets], drop_every, total_epochs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau.is_empty() || self.tau.contains(&0) {
            return Err(Error::validation("every basket needs a minimum ignored count >= 1"));
        }
        if self.drop_every == 0 || self.total_epochs == 0 {
            return Err(Error::validation("drop interval and epoch count must be positive"));
        }
        Ok(())
    }

    /// Ignored ratio at 1-based epoch `t`: `⌈(T−t)/t_r⌉ · t_r / T`, capped at 1.
    pub fn ratio(&self, epoch: u32) -> Result<f64> {
        schedule_ratio(self, epoch)
    }

    /// `d_k` for every basket at the given ratio.
    pub fn ignored_counts(&self, space: &LabelSpace, ratio: f64) -> Result<Vec<usize>> {
        if self.tau.len() != space.num_baskets() {
            return Err(Error::validation(format!(
                "schedule has {} minimum counts for {} baskets",
                self.tau.len(),
                space.num_baskets()
            )));
        }
        Ok(space
            .sizes()
            .iter()
            .zip(&self.tau)
            .map(|(&n, &tau)| ignored_count(n as usize, tau as usize, ratio))
            .collect())
    }
}

pub fn schedule_ratio(sched: &MiningSchedule, epoch: u32) -> Result<f64> {
    let total = sched.total_epochs;
    if epoch == 0 || epoch > total {
        return Err(Error::validation(format!("epoch {epoch} outside 1..={total}")));
    }
    let steps = (total - epoch).div_ceil(sched.drop_every);
    let r = (steps * sched.drop_every) as f64 / total as f64;
    Ok(r.min(1.0))
}

/// `d_k = min(N_k, max(τ_k, ⌈N_k·r⌉))`.
pub fn ignored_count(basket_size: usize, tau: usize, ratio: f64) -> usize {
    let scaled = (basket_size as f64 * ratio - COUNT_SLACK).ceil().max(0.0) as usize;
    basket_size.min(tau.max(scaled))
}

/// Mask from precomputed similarities: the `d_k` most similar classes of
/// each non-owner basket are cleared.
pub(crate) fn mask_from_scores(
    space: &LabelSpace,
    scores: &ColumnScores,
    owner: (BasketId, LocalId),
    ignored: &[usize],
) -> Result<NegativeMask> {
    if ignored.len() != space.num_baskets() {
        return Err(Error::validation(format!(
            "{} ignored counts for {} baskets",
            ignored.len(),
            space.num_baskets()
        )));
    }
    let mut mask = NegativeMask::all_ones(space, owner)?;
    let mut sims = Vec::new();
    for k in space.baskets().filter(|&k| k != owner.0) {
        let range = space.range(k);
        let d = ignored[k.index()];
        if d > range.len() {
            return Err(Error::validation(format!(
                "ignored count {d} exceeds size {} of basket {k}",
                range.len()
            )));
        }
        sims.clear();
        sims.extend(range.clone().map(|j| scores.sim(j)));
        for i in top_d(&sims, d) {
            mask.bits[range.start + i] = false;
        }
    }
    Ok(mask)
}

fn check_classifier(space: &LabelSpace, clf: &Classifier) -> Result<()> {
    if clf.num_classes() != space.total() {
        return Err(Error::validation(format!(
            "classifier has {} classes, label space has {}",
            clf.num_classes(),
            space.total()
        )));
    }
    Ok(())
}

/// Builds the negative mask of one sample by ranking every other basket's
/// classes by `g(W, x)` and clearing the top `d_k`.
pub fn mining_mask(
    space: &LabelSpace,
    cfg: &LossConfig,
    clf: &Classifier,
    x: &[f64],
    owner: (BasketId, LocalId),
    ignored: &[usize],
) -> Result<NegativeMask> {
    check_classifier(space, clf)?;
    if x.len() != clf.dim() {
        return Err(Error::DimensionMismatch {
            expected: clf.dim(),
            found: x.len(),
        });
    }
    let emb = Embedding::new(x);
    check_embedding(cfg.method, &emb)?;
    let scores = ColumnScores::compute(cfg, &clf.view(), &emb)?;
    mask_from_scores(space, &scores, owner, ignored)
}

fn masked_target(
    space: &LabelSpace,
    clf: &Classifier,
    owner: (BasketId, LocalId),
    mask: &NegativeMask,
) -> Result<usize> {
    check_classifier(space, clf)?;
    if mask.owner != owner {
        return Err(Error::validation(format!(
            "mask built for basket {} label {} used for basket {} label {}",
            mask.owner.0, mask.owner.1, owner.0, owner.1
        )));
    }
    if mask.bits.len() != space.total() {
        return Err(Error::validation("mask length differs from label space"));
    }
    Ok(space.network_id(owner.0, owner.1)?.index())
}

/// Basket-based softmax loss of one sample under a fixed mask.
pub fn bbs_loss(
    space: &LabelSpace,
    cfg: &LossConfig,
    clf: &Classifier,
    x: &[f64],
    owner: (BasketId, LocalId),
    mask: &NegativeMask,
) -> Result<f64> {
    let target = masked_target(space, clf, owner, mask)?;
    masked_loss(cfg, clf, x, target, &mask.bits, None)
}

/// Gradients of [`bbs_loss`]; the mask is held constant. Masked-out
/// columns get exactly zero gradient.
pub fn bbs_loss_grad(
    space: &LabelSpace,
    cfg: &LossConfig,
    clf: &Classifier,
    x: &[f64],
    owner: (BasketId, LocalId),
    mask: &NegativeMask,
) -> Result<Gradients> {
    let target = masked_target(space, clf, owner, mask)?;
    let mut g = Gradients::zeros(clf.num_classes(), clf.dim());
    masked_loss(cfg, clf, x, target, &mask.bits, Some((&mut g, 1.0)))?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::Method;

    #[test]
    fn label_space_offsets() {
        let s = LabelSpace::new(&[5, 3, 4]).unwrap();
        assert_eq!(s.offsets(), &[0, 5, 8]);
        assert_eq!(s.total(), 12);
        assert_eq!(s.network_id(BasketId(2), LocalId(2)).unwrap(), NetworkId(7));
        let one = LabelSpace::new(&[7]).unwrap();
        assert_eq!(one.offsets(), &[0]);
        assert_eq!(one.total(), 7);
    }

    #[test]
    fn label_space_rejects_bad_sizes() {
        assert!(LabelSpace::new(&[]).is_err());
        assert!(LabelSpace::new(&[3, 0, 2]).is_err());
        let s = LabelSpace::new(&[5, 3, 4]).unwrap();
        assert!(s.network_id(BasketId(2), LocalId(4)).is_err());
        assert!(s.network_id(BasketId(4), LocalId(1)).is_err());
        assert!(s.locate(NetworkId(13)).is_err());
    }

    #[test]
    fn network_id_is_a_bijection() {
        let s = LabelSpace::new(&[5, 3, 4, 1, 9]).unwrap();
        let mut seen = vec![false; s.total()];
        for k in s.baskets() {
            for l in 1..=s.size(k) as u32 {
                let id = s.network_id(k, LocalId(l)).unwrap();
                assert!(!seen[id.index()]);
                seen[id.index()] = true;
                assert_eq!(s.locate(id).unwrap(), (k, LocalId(l)));
                assert_eq!(s.basket_of(id.index()), k);
            }
        }
        assert!(seen.into_iter().all(|b| b));
    }

    #[test]
    fn schedule_examples() {
        let s = MiningSchedule::uniform(2, 1, 2, 20).unwrap();
        assert_eq!(s.ratio(1).unwrap(), 1.0);
        assert_eq!(s.ratio(20).unwrap(), 0.0);
        assert_eq!(s.ratio(10).unwrap(), 0.5);
        assert!(s.ratio(0).is_err());
        assert!(s.ratio(21).is_err());
    }

    #[test]
    fn schedule_is_a_staircase() {
        for (t_r, total) in [(1, 7), (2, 20), (3, 10), (4, 9), (5, 5)] {
            let s = MiningSchedule::uniform(1, 1, t_r, total).unwrap();
            let r: Vec<f64> = (1..=total).map(|t| s.ratio(t).unwrap()).collect();
            assert!(r[0] <= 1.0);
            assert_eq!(*r.last().unwrap(), 0.0);
            assert!(r.windows(2).all(|w| w[1] <= w[0]));
            // changes only happen at epochs t with (T - t) a multiple of t_r
            for t in 2..=total {
                if r[t as usize - 1] != r[t as usize - 2] {
                    assert_eq!((total - t) % t_r, 0, "t_r={t_r} T={total} t={t}");
                }
            }
        }
    }

    #[test]
    fn ignored_count_examples() {
        assert_eq!(ignored_count(100, 2, 0.5), 50);
        assert_eq!(ignored_count(100, 2, 0.0), 2);
        assert_eq!(ignored_count(3, 2, 0.1), 2);
        assert_eq!(ignored_count(3, 5, 0.1), 3);
        assert_eq!(ignored_count(30, 1, 0.1), 3);
        assert_eq!(ignored_count(7, 1, 1.0), 7);
    }

    #[test]
    fn full_ignore_clears_every_cross_basket_bit() {
        let space = LabelSpace::new(&[5, 3, 4]).unwrap();
        let cfg = LossConfig::standard(Method::CosFace);
        let cols: Vec<Vec<f64>> = (0..12).map(|j| vec![1.0, j as f64 * 0.1 + 0.05]).collect();
        let clf = Classifier::from_columns(&cols).unwrap();
        let m = mining_mask(&space, &cfg, &clf, &[0.3, 1.0], (BasketId(1), LocalId(2)), &[5, 3, 4])
            .unwrap();
        assert_eq!(m, NegativeMask::all_zeros(&space, (BasketId(1), LocalId(2))).unwrap());
    }

    #[test]
    fn oversized_ignore_count_is_rejected() {
        let space = LabelSpace::new(&[2, 2]).unwrap();
        let cfg = LossConfig::standard(Method::NormFace);
        let clf = Classifier::from_columns(&vec![vec![1.0, 0.5]; 4]).unwrap();
        let r = mining_mask(&space, &cfg, &clf, &[1.0, 0.0], (BasketId(1), LocalId(1)), &[0, 3]);
        assert!(r.is_err());
    }

    #[test]
    fn mask_owner_mismatch_is_rejected() {
        let space = LabelSpace::new(&[2, 2]).unwrap();
        let cfg = LossConfig::standard(Method::NormFace);
        let clf = Classifier::from_columns(&vec![vec![1.0, 0.5]; 4]).unwrap();
        let mask = NegativeMask::all_ones(&space, (BasketId(1), LocalId(1))).unwrap();
        let r = bbs_loss(&space, &cfg, &clf, &[1.0, 0.0], (BasketId(1), LocalId(2)), &mask);
        assert!(matches!(r, Err(Error::Validation(_))));
    }
}
