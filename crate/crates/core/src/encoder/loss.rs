//! Masked cluster-prediction cross-entropy.
//!
//! Each channel's loss is the mean cross-entropy over that channel's masked
//! cells; the total is the mean of the per-channel losses over channels that
//! have at least one masked cell. Unmasked cells never contribute.

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterAssignments;
use crate::error::{Error, Result};
use crate::featio::NUM_CHANNELS;
use crate::masking::MaskPlan;
use crate::scalar::Scalar;

use super::ops::log_sum_exp;

/// Per-channel sums that can be merged across the sequences of a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskedStats {
    pub ce_sum: [f64; NUM_CHANNELS],
    pub masked: [usize; NUM_CHANNELS],
    pub correct: [usize; NUM_CHANNELS],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskedLoss {
    pub loss: f64,
    pub per_channel: [f64; NUM_CHANNELS],
    pub masked_count: [usize; NUM_CHANNELS],
    /// Fraction of masked cells whose argmax equals the target; NaN when none.
    pub accuracy: [f64; NUM_CHANNELS],
}

impl MaskedStats {
    pub fn merge(&mut self, other: &MaskedStats) {
        for c in 0..NUM_CHANNELS {
            self.ce_sum[c] += other.ce_sum[c];
            self.masked[c] += other.masked[c];
            self.correct[c] += other.correct[c];
        }
    }

    pub fn active_channels(&self) -> usize {
        self.masked.iter().filter(|&&m| m > 0).count()
    }

    /// Weight applied to each masked cell's gradient on channel `c`.
    pub fn cell_weight(&self, c: usize) -> f64 {
        if self.masked[c] == 0 {
            0.0
        } else {
            1.0 / (self.masked[c] as f64 * self.active_channels() as f64)
        }
    }

    pub fn finish(&self) -> Result<MaskedLoss> {
        let active = self.active_channels();
        if active == 0 {
            return Err(Error::NoTargets);
        }
        let mut per_channel = [f64::NAN; NUM_CHANNELS];
        let mut accuracy = [f64::NAN; NUM_CHANNELS];
        let mut total = 0.0;
        for c in 0..NUM_CHANNELS {
            if self.masked[c] > 0 {
                per_channel[c] = self.ce_sum[c] / self.masked[c] as f64;
                accuracy[c] = self.correct[c] as f64 / self.masked[c] as f64;
                total += per_channel[c];
            }
        }
        Ok(MaskedLoss {
            loss: total / active as f64,
            per_channel,
            masked_count: self.masked,
            accuracy,
        })
    }
}

fn check<F>(logits: &[Vec<F>], targets: &ClusterAssignments, plan: &MaskPlan) -> Result<usize> {
    let len = plan.len();
    if logits.len() != NUM_CHANNELS || targets.len() != len {
        return Err(Error::Schema(format!(
            "{} logit channels, {} targets and a {len}-frame plan do not line up",
            logits.len(),
            targets.len()
        )));
    }
    let k = logits[0].len() / len.max(1);
    if logits.iter().any(|l| l.len() != k * len) {
        return Err(Error::Schema("logit tensors have unequal shapes".into()));
    }
    for t in 0..len {
        for c in 0..NUM_CHANNELS {
            if plan.is_masked(c, t) && targets.labels[t][c] as usize >= k {
                return Err(Error::Schema(format!(
                    "target {} at frame {t} exceeds k={k}",
                    targets.labels[t][c]
                )));
            }
        }
    }
    Ok(k)
}

/// Sums over the masked cells of one sequence.
pub fn masked_stats<F: Scalar>(logits: &[Vec<F>], targets: &ClusterAssignments, plan: &MaskPlan) -> Result<MaskedStats> {
    let k = check(logits, targets, plan)?;
    let mut s = MaskedStats::default();
    for c in 0..NUM_CHANNELS {
        for t in 0..plan.len() {
            if !plan.is_masked(c, t) {
                continue;
            }
            let row = &logits[c][t * k..(t + 1) * k];
            let y = targets.labels[t][c] as usize;
            s.ce_sum[c] += (log_sum_exp(row) - row[y]).to_f64_lossy();
            s.masked[c] += 1;
            if argmax(row) == y {
                s.correct[c] += 1;
            }
        }
    }
    Ok(s)
}

/// Lowest index among the maxima.
pub fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn masked_ce_loss<F: Scalar>(logits: &[Vec<F>], targets: &ClusterAssignments, plan: &MaskPlan) -> Result<MaskedLoss> {
    masked_stats(logits, targets, plan)?.finish()
}

/// Gradient of `Σ_c weight[c] · Σ_{masked t} CE(c, t)` with respect to the
/// logits: `weight[c] · (softmax − onehot)` on masked cells, zero elsewhere.
pub fn masked_ce_grad<F: Scalar>(
    logits: &[Vec<F>],
    targets: &ClusterAssignments,
    plan: &MaskPlan,
    weight: [f64; NUM_CHANNELS],
) -> Result<Vec<Vec<F>>> {
    let k = check(logits, targets, plan)?;
    let mut grads = Vec::with_capacity(NUM_CHANNELS);
    for c in 0..NUM_CHANNELS {
        let mut g = vec![F::zero(); logits[c].len()];
        let w = F::from_f64_lossy(weight[c]);
        for t in 0..plan.len() {
            if !plan.is_masked(c, t) || weight[c] == 0.0 {
                continue;
            }
            let row = &logits[c][t * k..(t + 1) * k];
            let lse = log_sum_exp(row);
            let dst = &mut g[t * k..(t + 1) * k];
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - lse).exp() * w;
            }
            let y = targets.labels[t][c] as usize;
            dst[y] = dst[y] - w;
        }
        grads.push(g);
    }
    Ok(grads)
}
