//! Numeric clean-up applied to raw detector output before clustering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Channel, FeatureSequence};

/// Result of [`interpolate_missing`].
#[derive(Debug, Clone, PartialEq)]
pub struct Interpolated {
    pub sequence: FeatureSequence,
    /// Number of cells that were filled in.
    pub filled: usize,
    /// Set when the channel had no detection at all and was left as zeros.
    pub no_detections: bool,
}

/// Fills absent cells of `channel` from the nearest present frames.
///
/// Interior gaps are linearly interpolated in time; leading and trailing gaps
/// copy the first/last present vector. Gaps of any length are bridged.
/// Present cells and the other channels are left bit-identical.
pub fn interpolate_missing(seq: &FeatureSequence, channel: Channel) -> Interpolated {
    let mut out = seq.clone();
    let c = channel.index();
    let present: Vec<usize> = (0..seq.len()).filter(|&t| seq.is_present(t, channel)).collect();
    let mut filled = 0;

    if present.is_empty() {
        for t in 0..seq.len() {
            out.channel_mut(t, channel).fill(0.0);
            out.presence[t][c] = true;
        }
        return Interpolated {
            sequence: out,
            filled: seq.len(),
            no_detections: true,
        };
    }

    let first = present[0];
    let last = *present.last().unwrap();
    for t in 0..seq.len() {
        if seq.is_present(t, channel) {
            continue;
        }
        if t < first || t > last {
            let src = if t < first { first } else { last };
            let v = seq.channel(src, channel).to_vec();
            out.channel_mut(t, channel).copy_from_slice(&v);
        } else {
            // t lies strictly inside a gap: find the bracketing detections.
            let i = present.partition_point(|&p| p < t);
            let (t0, t1) = (present[i - 1], present[i]);
            let span = (t1 - t0) as f64;
            let w1 = (t - t0) as f64 / span;
            let w0 = (t1 - t) as f64 / span;
            let (v0, v1) = (seq.channel(t0, channel), seq.channel(t1, channel));
            for ((dst, &a), &b) in out.channel_mut(t, channel).iter_mut().zip(v0).zip(v1) {
                *dst = (w0 * f64::from(a) + w1 * f64::from(b)) as f32;
            }
        }
        out.presence[t][c] = true;
        filled += 1;
    }
    Interpolated {
        sequence: out,
        filled,
        no_detections: false,
    }
}

/// Interpolates every channel; returns the channels that had no detections.
pub fn interpolate_all(seq: &FeatureSequence) -> (FeatureSequence, Vec<Channel>) {
    let mut cur = seq.clone();
    let mut empty = Vec::new();
    for ch in Channel::ALL {
        let r = interpolate_missing(&cur, ch);
        if r.no_detections {
            empty.push(ch);
        }
        cur = r.sequence;
    }
    (cur, empty)
}

/// Seven upper-body landmarks in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseLandmarks {
    /// Nose, left shoulder, right shoulder, left elbow, right elbow,
    /// left wrist, right wrist.
    pub points: [[f32; 2]; 7],
}

impl PoseLandmarks {
    pub const NOSE: usize = 0;
    pub const LEFT_SHOULDER: usize = 1;
    pub const RIGHT_SHOULDER: usize = 2;

    pub fn new(points: [[f32; 2]; 7]) -> Self {
        PoseLandmarks { points }
    }
}

/// Maps landmarks into a shoulder-anchored frame: the shoulder midpoint
/// becomes the origin and the shoulder distance becomes 1. No rotation is
/// removed. Each frame is normalized on its own.
pub fn normalize_pose(lm: &PoseLandmarks) -> Result<[f32; 14]> {
    let [lx, ly] = lm.points[PoseLandmarks::LEFT_SHOULDER].map(f64::from);
    let [rx, ry] = lm.points[PoseLandmarks::RIGHT_SHOULDER].map(f64::from);
    let width = (lx - rx).hypot(ly - ry);
    if !(width > 0.0) || !width.is_finite() {
        return Err(Error::DegeneratePose);
    }
    let (mx, my) = ((lx + rx) / 2.0, (ly + ry) / 2.0);
    let mut out = [0.0f32; 14];
    for (i, [x, y]) in lm.points.iter().enumerate() {
        out[2 * i] = ((f64::from(*x) - mx) / width) as f32;
        out[2 * i + 1] = ((f64::from(*y) - my) / width) as f32;
    }
    Ok(out)
}

/// Keeps frames `0, stride, 2·stride, …` and divides the frame-rate hint.
pub fn downsample(seq: &FeatureSequence, stride: usize) -> Result<FeatureSequence> {
    if stride == 0 {
        return Err(Error::Argument("downsample stride must be at least 1".into()));
    }
    let w = seq.dims().total();
    let kept: Vec<usize> = (0..seq.len()).step_by(stride).collect();
    let mut data = Vec::with_capacity(kept.len() * w);
    for &t in &kept {
        data.extend_from_slice(seq.frame(t));
    }
    let presence = kept.iter().map(|&t| seq.presence()[t]).collect();
    FeatureSequence::new(seq.dims(), data, presence, seq.frame_rate_hint() / stride as f32)
}
