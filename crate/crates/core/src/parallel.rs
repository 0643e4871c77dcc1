//! Sharded basket-based softmax.
//!
//! Class centers are split into `G` contiguous shards of `⌈L_M/G⌉` columns.
//! Each worker scores only its own columns, mines negatives inside every
//! truncated basket it holds (the intersection of its range with a basket's
//! range), and reports a partial `(max, Σ exp)` of its masked logits. The
//! partials are combined in shard order, so the result does not depend on
//! how workers are scheduled. Gradients for a shard's columns are written
//! only by that shard's worker.

use std::ops::Range;

use crate::bbs::{ignored_count, LabelSpace, NegativeMask};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::ids::{BasketId, NetworkId};
use crate::loss::{
    add_target_grad, check_embedding, range_grads, target_term, Classifier, ClassifierView,
    ColumnScores, Embedding, Gradients, LossConfig, Normalizer, Partial, Term,
};
use crate::select::top_d;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardLayout {
    total: usize,
    chunk: usize,
    ranges: Vec<Range<usize>>,
}

impl ShardLayout {
    pub fn num_shards(&self) -> usize {
        self.ranges.len()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn chunk(&self) -> usize {
        self.chunk
    }

    /// Zero-based half-open column range of shard `g` (0-based).
    pub fn range(&self, g: usize) -> Range<usize> {
        self.ranges[g].clone()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    /// Closed network-id interval of shard `g`, `None` for an empty shard.
    pub fn bounds(&self, g: usize) -> Option<(NetworkId, NetworkId)> {
        let r = &self.ranges[g];
        (!r.is_empty()).then(|| (NetworkId::from_index(r.start), NetworkId::from_index(r.end - 1)))
    }

    pub fn shard_of(&self, column: usize) -> usize {
        column / self.chunk
    }
}

/// Splits `total` columns across `shards` workers in chunks of
/// `⌈total/shards⌉`. Trailing shards may be short or empty.
pub fn shard_layout(total: usize, shards: usize) -> Result<ShardLayout> {
    if total == 0 || shards == 0 {
        return Err(Error::validation("shard layout needs classes and shards"));
    }
    let chunk = total.div_ceil(shards);
    let ranges = (0..shards)
        .map(|g| {
            let lo = (g * chunk).min(total);
            let hi = ((g + 1) * chunk).min(total);
            lo..hi
        })
        .collect();
    Ok(ShardLayout {
        total,
        chunk,
        ranges,
    })
}

/// The part of basket `basket` held by shard `shard`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardSegment {
    pub shard: usize,
    pub basket: BasketId,
    /// Zero-based column range.
    pub range: Range<usize>,
}

impl ShardSegment {
    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }

    pub fn first(&self) -> NetworkId {
        NetworkId::from_index(self.range.start)
    }

    pub fn last(&self) -> NetworkId {
        NetworkId::from_index(self.range.end - 1)
    }
}

fn intersect(a: &Range<usize>, b: &Range<usize>) -> Range<usize> {
    a.start.max(b.start)..a.end.min(b.end)
}

/// Nonempty shard/basket intersections for every basket other than
/// `exclude`, ordered by shard then basket.
pub fn shard_segments(
    layout: &ShardLayout,
    space: &LabelSpace,
    exclude: BasketId,
) -> Result<Vec<ShardSegment>> {
    check_layout(layout, space)?;
    space.check_basket(exclude)?;
    Ok((0..layout.num_shards())
        .flat_map(|g| segments_of_shard(layout, space, exclude, g))
        .collect())
}

fn segments_of_shard(
    layout: &ShardLayout,
    space: &LabelSpace,
    exclude: BasketId,
    g: usize,
) -> Vec<ShardSegment> {
    let shard = layout.range(g);
    space
        .baskets()
        .filter(|&k| k != exclude)
        .filter_map(|k| {
            let range = intersect(&shard, &space.range(k));
            (!range.is_empty()).then_some(ShardSegment {
                shard: g,
                basket: k,
                range,
            })
        })
        .collect()
}

fn check_layout(layout: &ShardLayout, space: &LabelSpace) -> Result<()> {
    if layout.total() != space.total() {
        return Err(Error::validation(format!(
            "shard layout covers {} classes, label space has {}",
            layout.total(),
            space.total()
        )));
    }
    Ok(())
}

/// Clears the `max(τ, ⌈len·r⌉)` (capped at `len`) most similar classes of a
/// segment, using only the segment's own columns.
pub fn shard_mask(
    segment: &ShardSegment,
    cfg: &LossConfig,
    clf: &Classifier,
    x: &[f64],
    tau: u32,
    ratio: f64,
) -> Result<Vec<bool>> {
    if segment.is_empty() || segment.range.end > clf.num_classes() {
        return Err(Error::validation("segment is empty or outside the classifier"));
    }
    if x.len() != clf.dim() {
        return Err(Error::DimensionMismatch {
            expected: clf.dim(),
            found: x.len(),
        });
    }
    let emb = Embedding::new(x);
    check_embedding(cfg.method, &emb)?;
    let scores = ColumnScores::compute(cfg, &clf.view_range(segment.range.clone()), &emb)?;
    let mut bits = vec![true; segment.len()];
    clear_segment(&scores, &segment.range, tau, ratio, &mut bits, segment.range.start);
    Ok(bits)
}

/// Clears top-d bits of `range` inside `bits`, which starts at column `base`.
fn clear_segment(
    scores: &ColumnScores,
    range: &Range<usize>,
    tau: u32,
    ratio: f64,
    bits: &mut [bool],
    base: usize,
) {
    let sims: Vec<f64> = range.clone().map(|j| scores.sim(j)).collect();
    let d = ignored_count(range.len(), tau as usize, ratio);
    for i in top_d(&sims, d) {
        bits[range.start + i - base] = false;
    }
}

/// Mining inputs for one step: per-basket minimum ignored counts and the
/// current ignored ratio.
#[derive(Clone, Copy, Debug)]
pub struct Mining<'a> {
    pub tau: &'a [u32],
    pub ratio: f64,
}

/// Where the negative mask of a sample comes from.
#[derive(Clone, Copy, Debug)]
pub enum MaskSource<'a> {
    /// Each shard mines its own truncated baskets.
    Mine(Mining<'a>),
    /// Fixed mask (used to compare against the serial path).
    Given(&'a NegativeMask),
}

/// Loss, the mask actually used, and gradients if requested.
#[derive(Clone, Debug)]
pub struct ParallelOutput {
    pub loss: f64,
    pub mask: NegativeMask,
}

struct ShardPass {
    scores: ColumnScores,
    bits: Vec<bool>,
    logits: Vec<f64>,
    partial: Partial,
    target: Option<(f64, Term)>,
}

/// Everything a worker needs, all read-only.
struct Job<'a> {
    layout: &'a ShardLayout,
    space: &'a LabelSpace,
    cfg: &'a LossConfig,
    clf: &'a Classifier,
    emb: Embedding<'a>,
    target: usize,
    owner: BasketId,
    source: MaskSource<'a>,
}

impl Job<'_> {
    fn view(&self, g: usize) -> ClassifierView<'_> {
        self.clf.view_range(self.layout.range(g))
    }

    fn forward(&self, g: usize) -> Result<ShardPass> {
        let range = self.layout.range(g);
        let view = self.view(g);
        let scores = ColumnScores::compute(self.cfg, &view, &self.emb)?;
        let mut bits = match self.source {
            MaskSource::Given(mask) => mask.bits[range.clone()].to_vec(),
            MaskSource::Mine(mining) => {
                let mut bits = vec![true; range.len()];
                for seg in segments_of_shard(self.layout, self.space, self.owner, g) {
                    let tau = mining.tau[seg.basket.index()];
                    clear_segment(&scores, &seg.range, tau, mining.ratio, &mut bits, range.start);
                }
                bits
            }
        };
        if range.contains(&self.target) {
            bits[self.target - range.start] = false;
        }
        let logits = scores.masked_logits(self.cfg, &view, &bits, self.target);
        let partial = Partial::from_logits(&logits);
        let target = if range.contains(&self.target) {
            Some(target_term(self.cfg, self.clf, &self.emb, self.target)?)
        } else {
            None
        };
        Ok(ShardPass {
            scores,
            bits,
            logits,
            partial,
            target,
        })
    }
}

/// Sharded evaluation of the basket-based softmax for one sample. When
/// `grads` is given, `scale ·` the gradients are added to it; each shard's
/// worker writes only its own columns.
#[allow(clippy::too_many_arguments)]
pub fn parallel_bbs(
    layout: &ShardLayout,
    space: &LabelSpace,
    cfg: &LossConfig,
    clf: &Classifier,
    x: &[f64],
    y: NetworkId,
    owner: BasketId,
    source: MaskSource<'_>,
    exec: Exec,
    grads: Option<(&mut Gradients, f64)>,
) -> Result<ParallelOutput> {
    check_layout(layout, space)?;
    if clf.num_classes() != space.total() {
        return Err(Error::validation("classifier and label space disagree"));
    }
    if x.len() != clf.dim() {
        return Err(Error::DimensionMismatch {
            expected: clf.dim(),
            found: x.len(),
        });
    }
    let (basket, local) = space.locate(y)?;
    if basket != owner {
        return Err(Error::validation(format!(
            "network id {y} lies in basket {basket}, not in basket {owner}"
        )));
    }
    match source {
        MaskSource::Given(mask) => {
            if mask.owner != (basket, local) || mask.bits.len() != space.total() {
                return Err(Error::validation("mask does not belong to this sample"));
            }
        }
        MaskSource::Mine(m) => {
            if m.tau.len() != space.num_baskets() {
                return Err(Error::validation("one minimum ignored count per basket required"));
            }
        }
    }
    let emb = Embedding::new(x);
    check_embedding(cfg.method, &emb)?;
    let job = Job {
        layout,
        space,
        cfg,
        clf,
        emb,
        target: y.index(),
        owner,
        source,
    };

    let passes = exec
        .map(layout.num_shards(), |g| job.forward(g))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let (target_logit, target_t) = passes
        .iter()
        .find_map(|p| p.target)
        .expect("target column belongs to some shard");
    let norm = Normalizer::gather(target_logit, passes.iter().map(|p| &p.partial));

    if let Some((g, scale)) = grads {
        let d = clf.dim();
        let mut chunks = split_columns(layout, d, &mut g.weights, &mut g.biases);
        let shard_gx = exec.map_mut(&mut chunks, |s, (gw, gb)| {
            let pass = &passes[s];
            range_grads(
                cfg,
                &job.view(s),
                &emb,
                &pass.scores,
                &pass.logits,
                &norm,
                scale,
                gw,
                gb,
            )
        });
        drop(chunks);
        for gx in shard_gx {
            for (a, b) in g.x.iter_mut().zip(&gx) {
                *a += b;
            }
        }
        add_target_grad(cfg, clf, &emb, job.target, &target_t, &norm, scale, g);
    }

    let bits = passes.into_iter().flat_map(|p| p.bits).collect();
    Ok(ParallelOutput {
        loss: norm.loss(),
        mask: NegativeMask {
            bits,
            owner: (basket, local),
        },
    })
}

/// Disjoint per-shard slices of dense gradient buffers.
fn split_columns<'a>(
    layout: &ShardLayout,
    dim: usize,
    mut weights: &'a mut [f64],
    mut biases: &'a mut [f64],
) -> Vec<(&'a mut [f64], &'a mut [f64])> {
    let mut out = Vec::with_capacity(layout.num_shards());
    for r in layout.ranges() {
        let (w, rest_w) = std::mem::take(&mut weights).split_at_mut(r.len() * dim);
        let (b, rest_b) = std::mem::take(&mut biases).split_at_mut(r.len());
        weights = rest_w;
        biases = rest_b;
        out.push((w, b));
    }
    out
}

/// Sharded loss with per-shard mining.
#[allow(clippy::too_many_arguments)]
pub fn parallel_bbs_loss(
    layout: &ShardLayout,
    space: &LabelSpace,
    cfg: &LossConfig,
    clf: &Classifier,
    x: &[f64],
    y: NetworkId,
    owner: BasketId,
    mining: Mining<'_>,
    exec: Exec,
) -> Result<f64> {
    let src = MaskSource::Mine(mining);
    Ok(parallel_bbs(layout, space, cfg, clf, x, y, owner, src, exec, None)?.loss)
}

/// Gradients of [`parallel_bbs_loss`] with the mined mask held fixed.
#[allow(clippy::too_many_arguments)]
pub fn parallel_bbs_grad(
    layout: &ShardLayout,
    space: &LabelSpace,
    cfg: &LossConfig,
    clf: &Classifier,
    x: &[f64],
    y: NetworkId,
    owner: BasketId,
    mining: Mining<'_>,
    exec: Exec,
) -> Result<Gradients> {
    let mut g = Gradients::zeros(clf.num_classes(), clf.dim());
    let src = MaskSource::Mine(mining);
    parallel_bbs(layout, space, cfg, clf, x, y, owner, src, exec, Some((&mut g, 1.0)))?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbs::{bbs_loss, bbs_loss_grad, mining_mask};
    use crate::ids::LocalId;
    use crate::loss::Method;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn closed(layout: &ShardLayout) -> Vec<Option<(u32, u32)>> {
        (0..layout.num_shards())
            .map(|g| layout.bounds(g).map(|(a, b)| (a.0, b.0)))
            .collect()
    }

    #[test]
    fn layout_examples() {
        let l = shard_layout(12, 4).unwrap();
        assert_eq!(closed(&l), vec![Some((1, 3)), Some((4, 6)), Some((7, 9)), Some((10, 12))]);
        let l = shard_layout(10, 4).unwrap();
        assert_eq!(closed(&l), vec![Some((1, 3)), Some((4, 6)), Some((7, 9)), Some((10, 10))]);
        let l = shard_layout(5, 1).unwrap();
        assert_eq!(closed(&l), vec![Some((1, 5))]);
        let l = shard_layout(5, 4).unwrap();
        assert_eq!(closed(&l), vec![Some((1, 2)), Some((3, 4)), Some((5, 5)), None]);
        let l = shard_layout(3, 5).unwrap();
        assert_eq!(closed(&l), vec![Some((1, 1)), Some((2, 2)), Some((3, 3)), None, None]);
        assert!(shard_layout(0, 2).is_err());
        assert!(shard_layout(4, 0).is_err());
    }

    #[test]
    fn segment_example() {
        let space = LabelSpace::new(&[5, 3, 4]).unwrap();
        let layout = shard_layout(12, 4).unwrap();
        let segs = shard_segments(&layout, &space, BasketId(1)).unwrap();
        let got: Vec<(usize, u32, u32, u32)> = segs
            .iter()
            .map(|s| (s.shard, s.basket.0, s.first().0, s.last().0))
            .collect();
        assert_eq!(got, vec![(1, 2, 6, 6), (2, 2, 7, 8), (2, 3, 9, 9), (3, 3, 10, 12)]);

        let one = shard_layout(12, 1).unwrap();
        let segs = shard_segments(&one, &space, BasketId(1)).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].range, space.range(BasketId(2)));
        assert_eq!(segs[1].range, space.range(BasketId(3)));
    }

    #[test]
    fn single_class_segment_is_ignored() {
        let cfg = LossConfig::standard(Method::NormFace);
        let clf = Classifier::from_columns(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let seg = ShardSegment {
            shard: 0,
            basket: BasketId(2),
            range: 1..2,
        };
        assert_eq!(shard_mask(&seg, &cfg, &clf, &[1.0, 1.0], 1, 0.0).unwrap(), vec![false]);
    }

    #[test]
    fn shard_mask_clears_two_largest() {
        let cfg = LossConfig::standard(Method::CosFace);
        let angles = [0.3, 2.0, 0.1, 1.0, 0.2];
        let cols: Vec<Vec<f64>> = angles.iter().map(|a: &f64| vec![a.cos(), a.sin()]).collect();
        let clf = Classifier::from_columns(&cols).unwrap();
        let seg = ShardSegment {
            shard: 0,
            basket: BasketId(1),
            range: 0..5,
        };
        let bits = shard_mask(&seg, &cfg, &clf, &[1.0, 0.0], 2, 0.0).unwrap();
        assert_eq!(bits, vec![true, true, false, true, false]);
    }

    fn random_clf(rng: &mut ChaCha8Rng, classes: usize, dim: usize) -> Classifier {
        let w = (0..classes * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Classifier::new(dim, w, vec![0.0; classes]).unwrap()
    }

    #[test]
    fn one_shard_reproduces_serial_bit_for_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let space = LabelSpace::new(&[6, 4, 5]).unwrap();
        let cfg = LossConfig::standard(Method::ArcFace);
        let clf = random_clf(&mut rng, 15, 6);
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let layout = shard_layout(15, 1).unwrap();
        let tau = [2, 2, 2];
        let owner = (BasketId(2), LocalId(3));
        let y = space.network_id(owner.0, owner.1).unwrap();
        let ignored = counts(&space, &tau, 0.3);
        let mask = mining_mask(&space, &cfg, &clf, &x, owner, &ignored).unwrap();
        let serial = bbs_loss(&space, &cfg, &clf, &x, owner, &mask).unwrap();
        let serial_g = bbs_loss_grad(&space, &cfg, &clf, &x, owner, &mask).unwrap();
        for exec in [Exec::Sequential, Exec::Threads] {
            let mining = Mining {
                tau: &tau,
                ratio: 0.3,
            };
            let mut g = Gradients::zeros(15, 6);
            let out = parallel_bbs(
                &layout,
                &space,
                &cfg,
                &clf,
                &x,
                y,
                owner.0,
                MaskSource::Mine(mining),
                exec,
                Some((&mut g, 1.0)),
            )
            .unwrap();
            assert_eq!(out.mask, mask);
            assert_eq!(out.loss.to_bits(), serial.to_bits());
            assert_eq!(g, serial_g);
        }
    }

    fn counts(space: &LabelSpace, tau: &[u32], r: f64) -> Vec<usize> {
        space
            .sizes()
            .iter()
            .zip(tau)
            .map(|(&n, &t)| ignored_count(n as usize, t as usize, r))
            .collect()
    }

    #[test]
    fn wrong_owner_is_rejected() {
        let space = LabelSpace::new(&[2, 2]).unwrap();
        let layout = shard_layout(4, 2).unwrap();
        let cfg = LossConfig::standard(Method::NormFace);
        let clf = Classifier::from_columns(&vec![vec![1.0, 0.5]; 4]).unwrap();
        let mining = Mining {
            tau: &[1, 1],
            ratio: 0.0,
        };
        let r = parallel_bbs_loss(
            &layout,
            &space,
            &cfg,
            &clf,
            &[1.0, 0.0],
            NetworkId(3),
            BasketId(1),
            mining,
            Exec::Sequential,
        );
        assert!(matches!(r, Err(Error::Validation(_))));
    }
}
