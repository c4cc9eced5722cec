//! Top-k recall and the label-smoothed cross-entropy.

use crate::error::{Error, Result};

/// 0-based rank of `label` in `row`: the number of classes that outrank it,
/// where a tie goes to the lower class index.
pub fn rank_of(row: &[f32], label: usize) -> usize {
    let x = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > x || (v == x && j < label))
        .count()
}

/// Fraction of rows whose true label is among the `k` highest logits.
pub fn recall_at_k(rows: &[Vec<f32>], labels: &[u32], k: usize) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::UndefinedMetric("recall over zero rows".into()));
    }
    if k == 0 {
        return Err(Error::Argument("recall@0 is undefined".into()));
    }
    if rows.len() != labels.len() {
        return Err(Error::Schema(format!("{} rows but {} labels", rows.len(), labels.len())));
    }
    let mut hits = 0;
    for (row, &l) in rows.iter().zip(labels) {
        if l as usize >= row.len() {
            return Err(Error::Data(format!("label {l} outside {} classes", row.len())));
        }
        if rank_of(row, l as usize) < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / rows.len() as f64)
}

/// Cross-entropy against `(1 − s)·onehot(label) + s/C` and its gradient with
/// respect to the logits.
pub fn smoothed_ce(logits: &[f32], label: usize, smoothing: f64) -> (f64, Vec<f32>) {
    let c = logits.len() as f64;
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = logits.iter().map(|&z| (f64::from(z) - max).exp()).collect();
    let s: f64 = e.iter().sum();
    let lse = max + s.ln();
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (j, (&z, &ej)) in logits.iter().zip(&e).enumerate() {
        let q = smoothing / c + if j == label { 1.0 - smoothing } else { 0.0 };
        loss -= q * (f64::from(z) - lse);
        grad.push((ej / s - q) as f32);
    }
    (loss, grad)
}

/// Smallest achievable smoothed cross-entropy: the entropy of the smoothed
/// target distribution.
pub fn smoothed_ce_floor(smoothing: f64, n_classes: usize) -> f64 {
    let c = n_classes as f64;
    let hi = 1.0 - smoothing + smoothing / c;
    let lo = smoothing / c;
    let term = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    term(hi) + (c - 1.0) * term(lo)
}
