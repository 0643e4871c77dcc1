//! Deterministic top-d selection.

use std::cmp::Ordering;

/// Descending by value, then ascending by position.
#[inline]
fn rank(values: &[f64], a: usize, b: usize) -> Ordering {
    values[b].total_cmp(&values[a]).then(a.cmp(&b))
}

/// Positions of the `d` largest values, ties broken toward the lower
/// position. The result is sorted by rank. `d` is capped at `values.len()`.
pub fn top_d(values: &[f64], d: usize) -> Vec<usize> {
    let d = d.min(values.len());
    if d == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if d < idx.len() {
        idx.select_nth_unstable_by(d - 1, |&a, &b| rank(values, a, b));
        idx.truncate(d);
    }
    idx.sort_unstable_by(|&a, &b| rank(values, a, b));
    idx
}
