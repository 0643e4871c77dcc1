//! Synthetic data, basket splitting, and the binary basket file.
//!
//! A dataset is split into `k` baskets by drawing, for every class, how many
//! baskets it lands in. A class is unique inside each basket it lands in and
//! gets a fresh local label there, so the same identity can appear under
//! several unrelated labels across baskets.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bbs::LabelSpace;
use crate::error::{Error, Result};
use crate::ids::{BasketId, LocalId};

pub const MAGIC: &[u8; 4] = b"BBS1";
pub const VERSION: u32 = 1;

/// A feature vector with its ground-truth identity.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub feature: Vec<f32>,
    pub global_class: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub feature: Vec<f32>,
    /// Ground truth; never seen by the trainer.
    pub global_class: u32,
    pub basket: BasketId,
    pub local_label: LocalId,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Basket {
    pub samples: Vec<Sample>,
    /// `classes[l - 1]` is the global class of local label `l`.
    pub classes: Vec<u32>,
}

impl Basket {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_set(&self) -> BTreeSet<u32> {
        self.classes.iter().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BasketSet {
    pub dim: usize,
    pub baskets: Vec<Basket>,
}

impl BasketSet {
    /// Everything in one basket, local label = rank of the global class.
    pub fn single(samples: &[LabeledSample]) -> Result<Self> {
        let dim = check_samples(samples)?;
        let classes: Vec<u32> = samples
            .iter()
            .map(|s| s.global_class)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let local: HashMap<u32, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let samples = samples
            .iter()
            .map(|s| Sample {
                feature: s.feature.clone(),
                global_class: s.global_class,
                basket: BasketId(1),
                local_label: LocalId::from_index(local[&s.global_class]),
            })
            .collect();
        Ok(BasketSet {
            dim,
            baskets: vec![Basket { samples, classes }],
        })
    }

    pub fn label_space(&self) -> Result<LabelSpace> {
        let sizes: Vec<u32> = self.baskets.iter().map(|b| b.num_classes() as u32).collect();
        LabelSpace::new(&sizes)
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.baskets.iter().flat_map(|b| &b.samples)
    }

    pub fn num_samples(&self) -> usize {
        self.baskets.iter().map(|b| b.samples.len()).sum()
    }

    /// Drops basket structure, keeping features and identities.
    pub fn to_labeled(&self) -> Vec<LabeledSample> {
        self.samples()
            .map(|s| LabeledSample {
                feature: s.feature.clone(),
                global_class: s.global_class,
            })
            .collect()
    }

    /// Checks the invariants: contiguous local labels, one local label per
    /// global class inside a basket, consistent sample labels, finite
    /// features of the declared dimension.
    pub fn validate(&self) -> Result<()> {
        if self.baskets.is_empty() {
            return Err(Error::validation("basket set is empty"));
        }
        if self.dim == 0 {
            return Err(Error::validation("feature dimension must be positive"));
        }
        for (k, b) in self.baskets.iter().enumerate() {
            let id = BasketId::from_index(k);
            if b.classes.is_empty() {
                return Err(Error::validation(format!("basket {id} has no classes")));
            }
            if b.class_set().len() != b.classes.len() {
                return Err(Error::validation(format!(
                    "basket {id} maps one global class to two local labels"
                )));
            }
            for s in &b.samples {
                if s.feature.len() != self.dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.dim,
                        found: s.feature.len(),
                    });
                }
                if s.feature.iter().any(|v| !v.is_finite()) {
                    return Err(Error::validation("feature contains NaN or Inf"));
                }
                let l = s.local_label.0 as usize;
                if s.basket != id || l == 0 || l > b.classes.len() {
                    return Err(Error::validation(format!(
                        "sample labelled ({}, {}) stored in basket {id}",
                        s.basket, s.local_label
                    )));
                }
                if b.classes[l - 1] != s.global_class {
                    return Err(Error::validation(format!(
                        "local label {l} of basket {id} maps to two global classes"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn check_samples(samples: &[LabeledSample]) -> Result<usize> {
    let dim = samples
        .first()
        .ok_or_else(|| Error::validation("dataset is empty"))?
        .feature
        .len();
    if dim == 0 {
        return Err(Error::validation("feature dimension must be positive"));
    }
    if let Some(s) = samples.iter().find(|s| s.feature.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: s.feature.len(),
        });
    }
    Ok(dim)
}

/// How to split a dataset: `probs[l-1]` is the chance a class lands in `l`
/// distinct baskets out of `parts`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub parts: usize,
    pub probs: Vec<f64>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(parts: usize, probs: Vec<f64>, seed: u64) -> Result<Self> {
        let s = SplitSpec { parts, probs, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.parts == 0 {
            return Err(Error::validation("split needs at least one part"));
        }
        if self.probs.len() != self.parts {
            return Err(Error::validation(format!(
                "{} probabilities for {} parts",
                self.probs.len(),
                self.parts
            )));
        }
        if self.probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::validation("probabilities must be non-negative"));
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// `[1 - ratio, ratio]`: with two parts, the expected Jaccard overlap of
/// the two baskets' class sets equals `ratio`.
pub fn overlap_probs(ratio: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::validation(format!("overlap ratio {ratio} outside [0, 1]")));
    }
    Ok(vec![1.0 - ratio, ratio])
}

/// `p_i = 2/(3^k − 1) · 3^(k−i)`, so each multiplicity is three times as
/// likely as the next.
pub fn geometric_probs(parts: usize) -> Result<Vec<f64>> {
    if parts < 2 {
        return Err(Error::validation("geometric split needs at least two parts"));
    }
    let k = parts as i32;
    let norm = 2.0 / (3f64.powi(k) - 1.0);
    Ok((1..=k).map(|i| norm * 3f64.powi(k - i)).collect())
}

/// Jaccard overlap of the global classes in two baskets.
pub fn overlap_ratio(a: &Basket, b: &Basket) -> f64 {
    let (a, b) = (a.class_set(), b.class_set());
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Mean Jaccard overlap over all basket pairs.
pub fn mean_pairwise_overlap(set: &BasketSet) -> f64 {
    let m = set.baskets.len();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..m {
        for j in i + 1..m {
            total += overlap_ratio(&set.baskets[i], &set.baskets[j]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Splits a labelled dataset into `spec.parts` baskets.
///
/// Classes are visited in ascending id order. Each draws a multiplicity
/// `l` (reduced to its sample count when smaller), its samples are
/// shuffled and dealt round-robin into `l` parts, and the parts go to `l`
/// distinct baskets chosen uniformly without replacement. Local labels are
/// assigned in arrival order.
pub fn split_dataset(data: &[LabeledSample], spec: &SplitSpec) -> Result<BasketSet> {
    spec.validate()?;
    let dim = check_samples(data)?;
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in data.iter().enumerate() {
        by_class.entry(s.global_class).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pick = WeightedIndex::new(&spec.probs)
        .map_err(|e| Error::validation(format!("bad probabilities: {e}")))?;
    let mut baskets = vec![Basket::default(); spec.parts];
    let mut order: Vec<usize> = (0..spec.parts).collect();

    for (&class, members) in &mut by_class {
        let drawn = pick.sample(&mut rng) + 1;
        let l = drawn.min(members.len());
        members.shuffle(&mut rng);
        order.sort_unstable();
        let (chosen, _) = order.partial_shuffle(&mut rng, l);
        for (part, &k) in chosen.iter().enumerate() {
            let basket = &mut baskets[k];
            basket.classes.push(class);
            let local = LocalId(basket.classes.len() as u32);
            for &i in members.iter().skip(part).step_by(l) {
                basket.samples.push(Sample {
                    feature: data[i].feature.clone(),
                    global_class: class,
                    basket: BasketId::from_index(k),
                    local_label: local,
                });
            }
        }
    }
    if let Some(k) = baskets.iter().position(|b| b.classes.is_empty()) {
        return Err(Error::validation(format!(
            "basket {} received no classes; use more classes or fewer parts",
            k + 1
        )));
    }
    Ok(BasketSet { dim, baskets })
}

/// Unit-sphere class centers with isotropic Gaussian noise, renormalized.
/// Global classes are `1..=num_classes`, samples grouped by class.
pub fn gen_synthetic(
    num_classes: usize,
    samples_per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    if num_classes == 0 || samples_per_class == 0 || dim == 0 {
        return Err(Error::validation("class count, samples per class and dimension must be positive"));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::validation(format!("spread {spread} must be non-negative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(num_classes * samples_per_class);
    for class in 1..=num_classes as u32 {
        let center = unit_gaussian(&mut rng, dim, None, 1.0);
        for _ in 0..samples_per_class {
            let v = if spread == 0.0 {
                center.clone()
            } else {
                unit_gaussian(&mut rng, dim, Some(&center), spread)
            };
            out.push(LabeledSample {
                feature: v.iter().map(|&x| x as f32).collect(),
                global_class: class,
            });
        }
    }
    Ok(out)
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize, mean: Option<&[f64]>, sigma: f64) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim)
            .map(|i| {
                let z: f64 = StandardNormal.sample(rng);
                mean.map_or(0.0, |m| m[i]) + sigma * z
            })
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
}

/// Writes the binary basket file.
pub fn save_baskets(path: impl AsRef<Path>, set: &BasketSet) -> Result<()> {
    let bytes = encode_baskets(set)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn load_baskets(path: impl AsRef<Path>) -> Result<BasketSet> {
    decode_baskets(&fs::read(path)?)
}

pub fn encode_baskets(set: &BasketSet) -> Result<Vec<u8>> {
    set.validate()?;
    let mut out = Vec::with_capacity(16 + set.num_samples() * (8 + 4 * set.dim));
    out.extend_from_slice(MAGIC);
    for v in [VERSION, set.baskets.len() as u32, set.dim as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for b in &set.baskets {
        out.extend_from_slice(&(b.classes.len() as u32).to_le_bytes());
        out.extend_from_slice(&(b.samples.len() as u32).to_le_bytes());
        for s in &b.samples {
            out.extend_from_slice(&s.local_label.0.to_le_bytes());
            out.extend_from_slice(&s.global_class.to_le_bytes());
            for v in &s.feature {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let left = self.buf.len() - self.pos;
        if left < n {
            return Err(Error::Truncated {
                offset: self.pos,
                expected: n - left,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::validation(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn decode_baskets(bytes: &[u8]) -> Result<BasketSet> {
    let mut r = Reader::new(bytes);
    let magic = r
        .take(4)
        .map_err(|_| Error::BadHeader("file shorter than magic".into()))?;
    if magic != MAGIC {
        return Err(Error::BadHeader(format!("magic {magic:?} is not BBS1")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::BadHeader(format!("unsupported version {version}")));
    }
    let m = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if m == 0 {
        return Err(Error::validation("basket file declares no baskets"));
    }
    if dim == 0 {
        return Err(Error::BadHeader("feature dimension is zero".into()));
    }
    let mut baskets = Vec::with_capacity(m.min(1 << 16));
    for k in 0..m {
        let n_classes = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut classes: Vec<Option<u32>> = vec![None; n_classes];
        let mut samples = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let local = r.u32()?;
            let global = r.u32()?;
            let feature = r.f32s(dim)?;
            if local == 0 || local as usize > n_classes {
                return Err(Error::validation(format!(
                    "local label {local} outside 1..={n_classes} in basket {}",
                    k + 1
                )));
            }
            match classes[local as usize - 1] {
                Some(g) if g != global => {
                    return Err(Error::validation(format!(
                        "local label {local} of basket {} maps to classes {g} and {global}",
                        k + 1
                    )))
                }
                _ => classes[local as usize - 1] = Some(global),
            }
            samples.push(Sample {
                feature,
                global_class: global,
                basket: BasketId::from_index(k),
                local_label: LocalId(local),
            });
        }
        let classes = classes
            .into_iter()
            .enumerate()
            .map(|(l, c)| {
                c.ok_or_else(|| {
                    Error::validation(format!("local label {} of basket {} has no samples", l + 1, k + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        baskets.push(Basket { samples, classes });
    }
    r.finish()?;
    let set = BasketSet { dim, baskets };
    set.validate()?;
    Ok(set)
}
