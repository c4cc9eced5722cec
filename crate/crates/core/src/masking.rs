//! Mask plans for multi-stream sequences.
//!
//! A [`MaskPlan`] is a `4 × T` boolean grid (channel-major, `true` = masked).
//! Three strategies are supported:
//!
//! * **Channel** masks whole channel rows, `⌈ratio·4⌉` of them (kept within
//!   `1..=3` for `0 < ratio < 1` so that some channel stays visible).
//! * **Time** draws one span row and broadcasts it to every channel.
//! * **Random** draws an independent span row per channel.
//!
//! A span row places non-overlapping runs of `span` frames at start positions
//! drawn without replacement until at least `round(ratio·T)` frames are
//! masked. When the remaining holes are all shorter than a span, the existing
//! runs are extended into them, so every maximal masked run is at least
//! `min(span, T)` long unless it touches the end of the sequence.

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featio::NUM_CHANNELS;
use crate::rng::{derive_rng, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    Channel,
    Time,
    Random,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 3] = [MaskStrategy::Channel, MaskStrategy::Time, MaskStrategy::Random];

    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::Channel => "channel",
            MaskStrategy::Time => "time",
            MaskStrategy::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub strategy: MaskStrategy,
    pub ratio: f64,
    /// Span length in frames; 3 frames is about 200 ms after downsampling.
    pub span: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            strategy: MaskStrategy::Random,
            ratio: 0.4,
            span: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    len: usize,
    grid: Vec<bool>,
}

impl MaskPlan {
    /// A plan that masks nothing.
    pub fn none(len: usize) -> Self {
        MaskPlan {
            len,
            grid: vec![false; NUM_CHANNELS * len],
        }
    }

    /// Builds a plan from a channel-major `4 × len` grid.
    pub fn from_grid(len: usize, grid: Vec<bool>) -> Result<Self> {
        if grid.len() != NUM_CHANNELS * len {
            return Err(Error::Schema(format!(
                "mask grid has {} cells, {len} frames need {}",
                grid.len(),
                NUM_CHANNELS * len
            )));
        }
        Ok(MaskPlan { len, grid })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_masked(&self, channel: usize, t: usize) -> bool {
        self.grid[channel * self.len + t]
    }

    pub fn set(&mut self, channel: usize, t: usize, masked: bool) {
        self.grid[channel * self.len + t] = masked;
    }

    pub fn row(&self, channel: usize) -> &[bool] {
        &self.grid[channel * self.len..(channel + 1) * self.len]
    }

    pub fn grid(&self) -> &[bool] {
        &self.grid
    }

    pub fn masked_count(&self, channel: usize) -> usize {
        self.row(channel).iter().filter(|&&m| m).count()
    }

    pub fn total_masked(&self) -> usize {
        self.grid.iter().filter(|&&m| m).count()
    }

    pub fn slice(&self, start: usize, end: usize) -> MaskPlan {
        let grid = (0..NUM_CHANNELS).flat_map(|c| self.row(c)[start..end].iter().copied()).collect();
        MaskPlan { len: end - start, grid }
    }

    /// Packs the grid into `ceil(4·T / 8)` bytes, channel-major, least
    /// significant bit first.
    pub fn to_bitmap(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.grid.len().div_ceil(8)];
        for (i, &m) in self.grid.iter().enumerate() {
            if m {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn from_bitmap(len: usize, bytes: &[u8]) -> Result<Self> {
        let cells = NUM_CHANNELS * len;
        if bytes.len() != cells.div_ceil(8) {
            return Err(Error::Length {
                expected: cells.div_ceil(8) as u64,
                found: bytes.len() as u64,
            });
        }
        let grid = (0..cells).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
        Ok(MaskPlan { len, grid })
    }
}

fn check_args(len: usize, ratio: f64, span: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::Argument("mask plans need at least one frame".into()));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Argument(format!("mask ratio {ratio} outside [0, 1]")));
    }
    if span == 0 {
        return Err(Error::Argument("span must be at least 1".into()));
    }
    Ok(())
}

/// One channel's worth of span masking.
fn span_row(len: usize, ratio: f64, span: usize, rng: &mut Rng) -> Vec<bool> {
    let target = (ratio * len as f64).round() as usize;
    let mut row = vec![false; len];
    if target == 0 {
        return row;
    }
    let mut count = 0;
    let mut starts: Vec<usize> = (0..len).collect();
    starts.shuffle(rng);
    for s in starts {
        if count >= target {
            return row;
        }
        let end = (s + span).min(len);
        if row[s..end].iter().all(|&m| !m) {
            row[s..end].fill(true);
            count += end - s;
        }
    }
    if count >= target {
        return row;
    }
    // Only holes shorter than a span are left; grow existing runs into them.
    let mut holes = Vec::new();
    let mut t = 0;
    while t < len {
        if row[t] {
            t += 1;
            continue;
        }
        let start = t;
        while t < len && !row[t] {
            t += 1;
        }
        holes.push((start, t));
    }
    holes.shuffle(rng);
    for (start, end) in holes {
        // A hole at the very start only borders a run on its right.
        let cells: Vec<usize> = if start == 0 { (start..end).rev().collect() } else { (start..end).collect() };
        for c in cells {
            if count >= target {
                return row;
            }
            row[c] = true;
            count += 1;
        }
    }
    row
}

/// Draws a plan for a `len`-frame sequence. Pure in its arguments.
pub fn make_mask_plan(len: usize, strategy: MaskStrategy, ratio: f64, span: usize, seed: u64) -> Result<MaskPlan> {
    check_args(len, ratio, span)?;
    let mut rng = derive_rng(seed, "mask", strategy as u64);
    let mut plan = MaskPlan::none(len);
    match strategy {
        MaskStrategy::Channel => {
            let n = channel_mask_count(ratio);
            for c in index::sample(&mut rng, NUM_CHANNELS, n) {
                plan.grid[c * len..(c + 1) * len].fill(true);
            }
        }
        MaskStrategy::Time => {
            let row = span_row(len, ratio, span, &mut rng);
            for c in 0..NUM_CHANNELS {
                plan.grid[c * len..(c + 1) * len].copy_from_slice(&row);
            }
        }
        MaskStrategy::Random => {
            for c in 0..NUM_CHANNELS {
                let row = span_row(len, ratio, span, &mut rng);
                plan.grid[c * len..(c + 1) * len].copy_from_slice(&row);
            }
        }
    }
    Ok(plan)
}

pub fn make_mask_plan_with(len: usize, cfg: &MaskConfig, seed: u64) -> Result<MaskPlan> {
    make_mask_plan(len, cfg.strategy, cfg.ratio, cfg.span, seed)
}

/// Number of whole channels the channel strategy masks for `ratio`.
pub fn channel_mask_count(ratio: f64) -> usize {
    if ratio <= 0.0 {
        0
    } else if ratio >= 1.0 {
        NUM_CHANNELS
    } else {
        ((ratio * NUM_CHANNELS as f64).ceil() as usize).clamp(1, NUM_CHANNELS - 1)
    }
}

/// Replaces masked `(t, channel)` cells of a `T × 4 × d` array with that
/// channel's mask embedding (`mask_embeddings` is `4 × d`). Unmasked cells are
/// copied unchanged.
pub fn apply_mask<F: Copy>(projected: &[F], d: usize, plan: &MaskPlan, mask_embeddings: &[F]) -> Result<Vec<F>> {
    let mut out = projected.to_vec();
    apply_mask_in_place(&mut out, d, plan, mask_embeddings)?;
    Ok(out)
}

pub fn apply_mask_in_place<F: Copy>(projected: &mut [F], d: usize, plan: &MaskPlan, mask_embeddings: &[F]) -> Result<()> {
    if projected.len() != plan.len() * NUM_CHANNELS * d || mask_embeddings.len() != NUM_CHANNELS * d {
        return Err(Error::Schema(format!(
            "projected array of {} values and {} embedding values do not fit a {}-frame plan of width {d}",
            projected.len(),
            mask_embeddings.len(),
            plan.len()
        )));
    }
    for t in 0..plan.len() {
        for c in 0..NUM_CHANNELS {
            if plan.is_masked(c, t) {
                let at = (t * NUM_CHANNELS + c) * d;
                projected[at..at + d].copy_from_slice(&mask_embeddings[c * d..(c + 1) * d]);
            }
        }
    }
    Ok(())
}

/// Lengths of maximal masked runs in `row` as `(start, len)`.
pub fn masked_runs(row: &[bool]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut t = 0;
    while t < row.len() {
        if !row[t] {
            t += 1;
            continue;
        }
        let start = t;
        while t < row.len() && row[t] {
            t += 1;
        }
        runs.push((start, t - start));
    }
    runs
}
