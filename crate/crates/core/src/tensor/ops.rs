//! Slice-level numeric kernels shared by the tape and by plain evaluation.

use std::cmp::Ordering;

/// Guard added under the square root of every L2 norm.
pub const L2_EPS: f64 = 1e-12;

/// Numerically stable softmax of a slice (max-subtracted).
///
/// Entries whose `mask` flag is `false` receive exactly zero probability.
/// Returns `None` when no entry is valid.
pub fn softmax_slice(logits: &[f64], mask: Option<&[bool]>) -> Option<Vec<f64>> {
    let valid = |i: usize| mask.map_or(true, |m| m[i]);
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| valid(*i))
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut out: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &x)| if valid(i) { (x - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Some(out)
}

/// `x / sqrt(sum(x^2) + eps)`; returns the normalized copy and the norm used.
pub fn l2_normalize_slice(x: &[f64]) -> (Vec<f64>, f64) {
    let norm = (x.iter().map(|v| v * v).sum::<f64>() + L2_EPS).sqrt();
    (x.iter().map(|v| v / norm).collect(), norm)
}

/// Indices of the `k` largest entries of `row`, ties broken toward the lower
/// index, returned in ascending index order.
///
/// `k` larger than the row is clamped to the row length (with a warning);
/// `k == 0` yields an empty selection.
pub fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let k = if k > row.len() {
        log::warn!("top-k: k={k} exceeds row length {}; clamping", row.len());
        row.len()
    } else {
        k
    };
    let mut order: Vec<usize> = (0..row.len()).collect();
    // Stable sort keeps lower indices first among equal values.
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    picked
}
