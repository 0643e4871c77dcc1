//! Verification and retrieval metrics over embeddings.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::datasim::LabeledSample;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::trainer::{forward_embed, ModelParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    /// Negative Euclidean distance, for plain softmax runs.
    Euclidean,
}

pub fn score(a: &[f64], b: &[f64], metric: Metric) -> f64 {
    match metric {
        Metric::Cosine => {
            let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
            for (x, y) in a.iter().zip(b) {
                ab += x * y;
                aa += x * x;
                bb += y * y;
            }
            let d = (aa * bb).sqrt();
            if d == 0.0 {
                0.0
            } else {
                ab / d
            }
        }
        Metric::Euclidean => -a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
    }
}

/// An embedding with its ground-truth identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedded {
    pub embedding: Vec<f64>,
    pub class: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub genuine: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<Pair>,
    pub metric: Metric,
}

/// Pair scores split by ground truth.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairScores {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl PairSet {
    pub fn scores(&self) -> PairScores {
        let mut s = PairScores::default();
        for p in &self.pairs {
            let v = score(&p.a, &p.b, self.metric);
            if p.genuine {
                s.genuine.push(v);
            } else {
                s.impostor.push(v);
            }
        }
        s
    }

    /// Balanced genuine/impostor pairs drawn with replacement.
    pub fn sample(items: &[Embedded], per_kind: usize, seed: u64) -> Result<PairSet> {
        let by_class = group(items);
        let multi: Vec<&Vec<usize>> = by_class.values().filter(|v| v.len() >= 2).collect();
        if multi.is_empty() || by_class.len() < 2 {
            return Err(Error::validation(
                "pairs need a class with two samples and at least two classes",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = Vec::with_capacity(2 * per_kind);
        for _ in 0..per_kind {
            let members = multi[rng.gen_range(0..multi.len())];
            let picked: Vec<&usize> = members.choose_multiple(&mut rng, 2).collect();
            pairs.push(Pair {
                a: items[*picked[0]].embedding.clone(),
                b: items[*picked[1]].embedding.clone(),
                genuine: true,
            });
        }
        let mut made = 0;
        while made < per_kind {
            let i = rng.gen_range(0..items.len());
            let j = rng.gen_range(0..items.len());
            if items[i].class == items[j].class {
                continue;
            }
            pairs.push(Pair {
                a: items[i].embedding.clone(),
                b: items[j].embedding.clone(),
                genuine: false,
            });
            made += 1;
        }
        Ok(PairSet {
            pairs,
            metric: Metric::Cosine,
        })
    }
}

fn group(items: &[Embedded]) -> BTreeMap<u32, Vec<usize>> {
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        by_class.entry(it.class).or_default().push(i);
    }
    by_class
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TarAtFar {
    pub far: f64,
    pub tar: f64,
    pub threshold: f64,
    /// Fewer impostors than `1/far`: the requested rate is not resolvable.
    pub unresolved: bool,
}

/// Accepts pairs scoring `≥ threshold`; the threshold is the smallest one
/// that accepts at most `⌊far · n_impostor⌋` impostors.
pub fn tar_at_far(scores: &PairScores, far: f64) -> Result<TarAtFar> {
    if !(far > 0.0 && far <= 1.0) {
        return Err(Error::validation(format!("far {far} outside (0, 1]")));
    }
    if scores.genuine.is_empty() || scores.impostor.is_empty() {
        return Err(Error::validation("need at least one genuine and one impostor pair"));
    }
    let n = scores.impostor.len();
    let mut imp = scores.impostor.clone();
    imp.sort_by(|a, b| b.total_cmp(a));
    let allowed = (far * n as f64 + 1e-9).floor() as usize;
    let threshold = if allowed >= n {
        imp[n - 1].min(scores.genuine.iter().copied().fold(f64::INFINITY, f64::min))
    } else {
        imp[allowed].next_up()
    };
    let accepted = scores.genuine.iter().filter(|&&s| s >= threshold).count();
    Ok(TarAtFar {
        far,
        tar: accepted as f64 / scores.genuine.len() as f64,
        threshold,
        unresolved: (n as f64) * far < 1.0,
    })
}

/// Best single-threshold accuracy over all midpoints of the sorted scores
/// and the two extremes.
pub fn verification_accuracy(scores: &PairScores) -> Result<f64> {
    let total = scores.genuine.len() + scores.impostor.len();
    if total == 0 {
        return Err(Error::validation("empty pair set"));
    }
    let mut all: Vec<(f64, bool)> = scores
        .genuine
        .iter()
        .map(|&s| (s, true))
        .chain(scores.impostor.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // threshold below everything: all accepted
    let mut correct = scores.genuine.len();
    let mut best = correct;
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                correct -= 1;
            } else {
                correct += 1;
            }
            i += 1;
        }
        best = best.max(correct);
    }
    Ok(best as f64 / total as f64)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RetrievalSet {
    pub queries: Vec<Embedded>,
    pub gallery: Vec<Embedded>,
    pub metric: Metric,
}

impl RetrievalSet {
    pub fn validate(&self) -> Result<()> {
        if self.queries.is_empty() {
            return Err(Error::validation("no queries"));
        }
        let classes: std::collections::BTreeSet<u32> = self.gallery.iter().map(|g| g.class).collect();
        if let Some(q) = self.queries.iter().find(|q| !classes.contains(&q.class)) {
            return Err(Error::validation(format!("query class {} missing from gallery", q.class)));
        }
        Ok(())
    }

    /// `queries_per_class` random samples of each class become queries,
    /// the rest the gallery. Classes with too few samples are skipped.
    pub fn split(items: &[Embedded], queries_per_class: usize, seed: u64) -> Result<RetrievalSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rs = RetrievalSet::default();
        for members in group(items).into_values() {
            if members.len() <= queries_per_class {
                continue;
            }
            let mut members = members;
            members.shuffle(&mut rng);
            let (q, g) = members.split_at(queries_per_class);
            rs.queries.extend(q.iter().map(|&i| items[i].clone()));
            rs.gallery.extend(g.iter().map(|&i| items[i].clone()));
        }
        rs.validate()?;
        Ok(rs)
    }

    /// Gallery indices by descending score, ties to the lower index.
    fn ranking(&self, q: &Embedded) -> Vec<bool> {
        let mut scored: Vec<(f64, usize)> = self
            .gallery
            .iter()
            .enumerate()
            .map(|(i, g)| (score(&q.embedding, &g.embedding, self.metric), i))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.iter().map(|&(_, i)| self.gallery[i].class == q.class).collect()
    }

    fn rankings(&self, exec: Exec) -> Vec<Vec<bool>> {
        exec.map(self.queries.len(), |i| self.ranking(&self.queries[i]))
    }
}

/// Fraction of queries with a same-class gallery item within the top `k`.
pub fn cmc_topk(rs: &RetrievalSet, k: usize) -> Result<f64> {
    Ok(cmc_curve(rs, k, Exec::default())?[k - 1])
}

/// CMC values for `k = 1..=max_k`.
pub fn cmc_curve(rs: &RetrievalSet, max_k: usize, exec: Exec) -> Result<Vec<f64>> {
    if max_k == 0 {
        return Err(Error::validation("k must be at least 1"));
    }
    rs.validate()?;
    let mut hits = vec![0usize; max_k];
    for rank in rs.rankings(exec) {
        if let Some(first) = rank.iter().position(|&m| m) {
            for h in hits.iter_mut().skip(first) {
                *h += 1;
            }
        }
    }
    let n = rs.queries.len() as f64;
    Ok(hits.into_iter().map(|h| h as f64 / n).collect())
}

/// Mean over queries of average precision over the full ranked gallery.
pub fn mean_ap(rs: &RetrievalSet) -> Result<f64> {
    rs.validate()?;
    let aps: Vec<f64> = rs.rankings(Exec::default()).iter().map(|r| average_precision(r)).collect();
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

pub fn average_precision(ranked_matches: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &m) in ranked_matches.iter().enumerate() {
        if m {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

pub fn embed_all(model: &ModelParams, samples: &[LabeledSample]) -> Result<Vec<Embedded>> {
    samples
        .iter()
        .map(|s| {
            let x: Vec<f64> = s.feature.iter().map(|&v| v as f64).collect();
            Ok(Embedded {
                embedding: forward_embed(model, &x)?,
                class: s.global_class,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Pairs,
    Retrieval,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairs" => Ok(Protocol::Pairs),
            "retrieval" => Ok(Protocol::Retrieval),
            _ => Err(Error::validation(format!("unknown protocol {s:?}"))),
        }
    }
}

/// Metric name and value, in a fixed order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<(String, f64)>,
    pub warnings: Vec<String>,
}

impl Report {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (n, v) in &self.rows {
            s.push_str(&format!("{n},{v}\n"));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub protocol: Protocol,
    pub fars: Vec<f64>,
    pub pairs_per_kind: usize,
    pub queries_per_class: usize,
    pub seed: u64,
    #[serde(default)]
    pub metric: Metric,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            protocol: Protocol::Pairs,
            fars: vec![1e-2, 1e-3],
            pairs_per_kind: 3000,
            queries_per_class: 1,
            seed: 0,
            metric: Metric::Cosine,
        }
    }
}

/// Embeds `samples` and computes the protocol's metrics.
pub fn evaluate(model: &ModelParams, samples: &[LabeledSample], opts: &EvalOptions) -> Result<Report> {
    let items = embed_all(model, samples)?;
    evaluate_embedded(&items, opts)
}

pub fn evaluate_embedded(items: &[Embedded], opts: &EvalOptions) -> Result<Report> {
    let mut report = Report::default();
    match opts.protocol {
        Protocol::Pairs => {
            let mut pairs = PairSet::sample(items, opts.pairs_per_kind, opts.seed)?;
            pairs.metric = opts.metric;
            let scores = pairs.scores();
            report
                .rows
                .push(("accuracy".into(), verification_accuracy(&scores)?));
            for &far in &opts.fars {
                let t = tar_at_far(&scores, far)?;
                if t.unresolved {
                    report.warnings.push(format!(
                        "far {far} not resolvable with {} impostor pairs",
                        scores.impostor.len()
                    ));
                }
                report.rows.push((format!("tar@far={far}"), t.tar));
            }
        }
        Protocol::Retrieval => {
            let mut rs = RetrievalSet::split(items, opts.queries_per_class, opts.seed)?;
            rs.metric = opts.metric;
            let cmc = cmc_curve(&rs, 5.min(rs.gallery.len()), Exec::default())?;
            report.rows.push(("top1".into(), cmc[0]));
            report.rows.push(("top5".into(), *cmc.last().unwrap()));
            report.rows.push(("map".into(), mean_ap(&rs)?));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(g: &[f64], i: &[f64]) -> PairScores {
        PairScores {
            genuine: g.to_vec(),
            impostor: i.to_vec(),
        }
    }

    #[test]
    fn tar_separated() {
        let s = scores(&[0.8, 0.9], &[0.1, 0.2, 0.3, 0.4]);
        for far in [0.25, 0.5, 1.0] {
            assert_eq!(tar_at_far(&s, far).unwrap().tar, 1.0);
        }
    }

    #[test]
    fn tar_one_impostor_allowed() {
        // one of four impostors may be accepted, so 0.95 is let through
        let s = scores(&[0.9], &[0.1, 0.2, 0.3, 0.95]);
        let t = tar_at_far(&s, 0.25).unwrap();
        assert!(t.threshold > 0.3 && t.threshold < 0.3 + 1e-12);
        assert_eq!(t.tar, 1.0);
        let t = tar_at_far(&s, 0.2).unwrap();
        assert!(t.threshold > 0.95);
        assert_eq!(t.tar, 0.0);
        assert!(t.unresolved);
        assert!(!tar_at_far(&s, 0.25).unwrap().unresolved);
    }

    #[test]
    fn tar_rejects_bad_input() {
        let s = scores(&[0.5], &[0.5]);
        assert!(tar_at_far(&s, 0.0).is_err());
        assert!(tar_at_far(&s, 1.5).is_err());
        assert!(tar_at_far(&scores(&[], &[0.1]), 0.5).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(verification_accuracy(&scores(&[0.9, 0.8], &[0.1, 0.2])).unwrap(), 1.0);
        let c = scores(&[0.5; 3], &[0.5; 7]);
        assert!((verification_accuracy(&c).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn cmc_and_ap_examples() {
        let e = |v: f64, c| Embedded {
            embedding: vec![1.0, v],
            class: c,
        };
        let rs = RetrievalSet {
            queries: vec![e(0.0, 1)],
            gallery: vec![e(0.01, 2), e(0.02, 3), e(0.5, 1), e(3.0, 4)],
            metric: Metric::Cosine,
        };
        assert_eq!(cmc_topk(&rs, 1).unwrap(), 0.0);
        assert_eq!(cmc_topk(&rs, 3).unwrap(), 1.0);
        assert_eq!(cmc_topk(&rs, 2).unwrap(), 0.0);
        assert!((mean_ap(&rs).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(average_precision(&[false, true]), 0.5);
        assert_eq!(average_precision(&[true, true, false]), 1.0);
    }

    #[test]
    fn retrieval_needs_query_class_in_gallery() {
        let rs = RetrievalSet {
            queries: vec![Embedded {
                embedding: vec![1.0],
                class: 7,
            }],
            gallery: vec![Embedded {
                embedding: vec![1.0],
                class: 1,
            }],
            metric: Metric::Cosine,
        };
        assert!(mean_ap(&rs).is_err());
    }
}
