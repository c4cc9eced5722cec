//! Masked cluster-prediction pretraining.
//!
//! One optimizer step draws the next batch from a frame-budgeted schedule,
//! draws a fresh mask plan for every piece of the batch, runs forward and
//! backward passes, and applies an Adam update at [`lr_at`]. Every random
//! choice is derived from `(seed, step)`, so a run is a pure function of its
//! configuration and can be resumed from any saved [`TrainState`].
//!
//! Per-sequence work may run on the rayon pool; gradients and statistics are
//! always reduced in batch order, so parallel and serial runs produce the same
//! bits. Serial runs additionally log a zero wall clock, which makes whole
//! metric logs byte-comparable.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{assign_all, ClusterAssignments, ClusterModel};
use crate::encoder::checkpoint::{atomic_write, Cursor};
use crate::encoder::{
    masked_ce_grad, masked_stats, read_checkpoint, save_checkpoint, write_checkpoint, Encoder, EncoderConfig,
    EncoderParams, ForwardCache, ForwardOutput, MaskedLoss, MaskedStats, OutputGrads,
};
use crate::error::{Error, Result};
use crate::featio::{FeatureSequence, NUM_CHANNELS};
use crate::masking::{make_mask_plan_with, MaskConfig, MaskPlan};
use crate::rng::{derive_rng, derive_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    /// Upper bound on the frames of one batch.
    pub frame_budget: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub mask: MaskConfig,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: usize,
    /// Single-threaded execution with a zeroed wall clock in the log.
    pub serial: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 2_000,
            peak_lr: 5e-4,
            warmup_fraction: 0.08,
            frame_budget: 1_500,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            grad_clip: Some(1.0),
            seed: 0,
            mask: MaskConfig::default(),
            checkpoint_every: 0,
            serial: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad(format!("warmup_fraction {} must lie in (0, 1)", self.warmup_fraction));
        }
        if self.frame_budget == 0 {
            return bad("frame_budget must be at least 1".into());
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr {} must be positive", self.peak_lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad("adam eps must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        make_mask_plan_with(1, &self.mask, 0).map_err(|e| Error::Config(format!("mask: {e}")))?;
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).floor() as usize
    }
}

/// Learning rate at `step`: linear warmup from 0 to `peak_lr` over
/// `⌊warmup_fraction · total⌋` steps, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    let total = cfg.total_steps;
    if step > total {
        return Err(Error::Argument(format!("step {step} outside 0..={total}")));
    }
    let warm = cfg.warmup_steps();
    Ok(if step < warm {
        cfg.peak_lr * step as f64 / warm as f64
    } else if total == warm {
        if step == 0 { 0.0 } else { cfg.peak_lr }
    } else {
        cfg.peak_lr * (total - step) as f64 / (total - warm) as f64
    })
}

/// Frames `start..end` of sequence `seq`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Piece {
    pub seq: usize,
    pub start: usize,
    pub end: usize,
}

impl Piece {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

pub type Batch = Vec<Piece>;

/// One epoch of batches over sequences of the given lengths.
///
/// Sequences are shuffled, cut into windows of at most `budget` frames, and
/// packed greedily in order: a piece joins the open batch if it fits and
/// otherwise starts a new one.
pub fn make_batches(lengths: &[usize], budget: usize, seed: u64) -> Result<Vec<Batch>> {
    if budget == 0 {
        return Err(Error::Argument("frame budget must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut derive_rng(seed, "pretrain.schedule", 0));
    let mut batches = Vec::new();
    let mut open: Batch = Vec::new();
    let mut used = 0;
    for i in order {
        let mut start = 0;
        while start < lengths[i] {
            let end = (start + budget).min(lengths[i]);
            if used + (end - start) > budget {
                batches.push(std::mem::take(&mut open));
                used = 0;
            }
            open.push(Piece { seq: i, start, end });
            used += end - start;
            start = end;
        }
    }
    if !open.is_empty() {
        batches.push(open);
    }
    Ok(batches)
}

/// One line of the metrics log. Channels without masked cells log `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_per_channel: [Option<f64>; NUM_CHANNELS],
    pub acc_per_channel: [Option<f64>; NUM_CHANNELS],
    pub wallclock_ms: u64,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl MetricsRecord {
    fn new(step: usize, lr: f64, loss: &MaskedLoss, wallclock_ms: u64) -> Self {
        MetricsRecord {
            step,
            lr,
            loss_total: loss.loss,
            loss_per_channel: loss.per_channel.map(finite),
            acc_per_channel: loss.accuracy.map(finite),
            wallclock_ms,
        }
    }
}

pub const STATE_MAGIC: &[u8; 4] = b"SHS1";
pub const STATE_VERSION: u32 = 1;

/// Everything needed to continue a run bit-exactly.
///
/// Random draws are derived from the configured seed and the step counter, so
/// the counter and the schedule position stand in for a generator state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    /// Index of the next batch within the current epoch.
    pub cursor: usize,
    pub model: Encoder<f32>,
    /// Adam first and second moments in registry order.
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    /// Metrics of the most recent step.
    pub last: Option<MetricsRecord>,
}

impl TrainState {
    pub fn new(enc_cfg: EncoderConfig, seed: u64) -> Result<Self> {
        let model = Encoder::new(enc_cfg, derive_seed(seed, "pretrain.init", 0))?;
        Ok(Self::from_model(model))
    }

    pub fn from_model(model: Encoder<f32>) -> Self {
        let n = model.params.num_params();
        TrainState {
            step: 0,
            epoch: 0,
            cursor: 0,
            model,
            m: vec![0.0; n],
            v: vec![0.0; n],
            last: None,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STATE_MAGIC);
        out.extend_from_slice(&STATE_VERSION.to_le_bytes());
        for x in [self.step, self.epoch, self.cursor] {
            out.extend_from_slice(&(x as u64).to_le_bytes());
        }
        let ckpt = write_checkpoint(&self.model);
        out.extend_from_slice(&(ckpt.len() as u64).to_le_bytes());
        out.extend_from_slice(&ckpt);
        for moments in [&self.m, &self.v] {
            for x in moments {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let last = serde_json::to_vec(&self.last).expect("metrics serialize");
        out.extend_from_slice(&(last.len() as u64).to_le_bytes());
        out.extend_from_slice(&last);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        if r.take(4)? != STATE_MAGIC {
            return Err(Error::Format("bad magic, expected \"SHS1\"".into()));
        }
        let version = r.u32()?;
        if version != STATE_VERSION {
            return Err(Error::Format(format!("unsupported train-state version {version}")));
        }
        let step = r.u64()? as usize;
        let epoch = r.u64()? as usize;
        let cursor = r.u64()? as usize;
        let n = r.u64()? as usize;
        let model = read_checkpoint(r.take(n)?)?;
        let count = model.params.num_params();
        let moments = |r: &mut Cursor<'_>| -> Result<Vec<f32>> {
            Ok(r.take(count * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect())
        };
        let m = moments(&mut r)?;
        let v = moments(&mut r)?;
        let n = r.u64()? as usize;
        let last = serde_json::from_slice(r.take(n)?).map_err(|e| Error::Format(format!("metrics record: {e}")))?;
        if !r.is_done() {
            return Err(Error::Schema("trailing bytes after train state".into()));
        }
        Ok(TrainState {
            step,
            epoch,
            cursor,
            model,
            m,
            v,
            last,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        atomic_write(path.as_ref(), &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Pseudo-labels for every sequence, checked against the encoder.
pub fn prepare_targets(
    dataset: &[FeatureSequence],
    cluster_models: &[ClusterModel; NUM_CHANNELS],
    enc_cfg: &EncoderConfig,
) -> Result<Vec<ClusterAssignments>> {
    for (c, m) in cluster_models.iter().enumerate() {
        if m.k != enc_cfg.k_per_channel {
            return Err(Error::Schema(format!(
                "cluster model {} has k={}, encoder predicts k={}",
                m.channel, m.k, enc_cfg.k_per_channel
            )));
        }
        if m.dim != enc_cfg.channel_dims.0[c] {
            return Err(Error::Schema(format!(
                "cluster model {} has dim {}, encoder expects {}",
                m.channel, m.dim, enc_cfg.channel_dims.0[c]
            )));
        }
    }
    dataset.par_iter().map(|s| assign_all(cluster_models, s)).collect()
}

fn map_in_order<T: Sync, U: Send>(serial: bool, xs: &[T], f: impl Fn(usize, &T) -> U + Sync + Send) -> Vec<U> {
    if serial {
        xs.iter().enumerate().map(|(i, x)| f(i, x)).collect()
    } else {
        xs.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
}

/// Seed of the mask plan for piece `index` of the batch at `step`.
pub fn mask_seed(seed: u64, step: usize, index: usize) -> u64 {
    derive_seed(derive_seed(seed, "pretrain.mask", step as u64), "piece", index as u64)
}

struct Prepared {
    seq: FeatureSequence,
    targets: ClusterAssignments,
    plan: MaskPlan,
}

/// Training driver over a fixed dataset.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub state: TrainState,
    data: &'a [FeatureSequence],
    targets: &'a [ClusterAssignments],
    lengths: Vec<usize>,
    schedule: Vec<Batch>,
    out_dir: Option<PathBuf>,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: TrainConfig,
        state: TrainState,
        data: &'a [FeatureSequence],
        targets: &'a [ClusterAssignments],
    ) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Precondition("pretraining needs a non-empty dataset".into()));
        }
        if data.len() != targets.len() {
            return Err(Error::Schema(format!("{} sequences but {} target sets", data.len(), targets.len())));
        }
        for (s, t) in data.iter().zip(targets) {
            if s.len() != t.len() {
                return Err(Error::Schema("targets do not cover their sequence".into()));
            }
        }
        let lengths: Vec<usize> = data.iter().map(FeatureSequence::len).collect();
        let schedule = make_batches(&lengths, cfg.frame_budget, derive_seed(cfg.seed, "epoch", state.epoch as u64))?;
        Ok(Trainer {
            cfg,
            state,
            data,
            targets,
            lengths,
            schedule,
            out_dir: None,
            started: Instant::now(),
        })
    }

    /// Writes `metrics.jsonl` and checkpoints under `dir`.
    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        self.out_dir = Some(dir);
        Ok(self)
    }

    fn next_batch(&mut self) -> Result<Batch> {
        while self.state.cursor >= self.schedule.len() {
            self.state.epoch += 1;
            self.state.cursor = 0;
            self.schedule = make_batches(
                &self.lengths,
                self.cfg.frame_budget,
                derive_seed(self.cfg.seed, "epoch", self.state.epoch as u64),
            )?;
        }
        let b = self.schedule[self.state.cursor].clone();
        self.state.cursor += 1;
        Ok(b)
    }

    fn prepare(&self, batch: &[Piece], step: usize) -> Result<Vec<Prepared>> {
        batch
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let seq = self.data[p.seq].slice(p.start, p.end)?;
                let plan = make_mask_plan_with(p.len(), &self.cfg.mask, mask_seed(self.cfg.seed, step, i))?;
                Ok(Prepared {
                    seq,
                    targets: self.targets[p.seq].slice(p.start, p.end),
                    plan,
                })
            })
            .collect()
    }

    /// Runs one optimizer step and returns its metrics.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        let step = self.state.step;
        if step >= self.cfg.total_steps {
            return Err(Error::Argument(format!("run already finished at step {step}")));
        }
        let lr = lr_at(step, &self.cfg)?;
        let batch = self.next_batch()?;
        let pieces = self.prepare(&batch, step)?;
        let model = &self.state.model;
        type Fwd = (ForwardOutput<f32>, ForwardCache<f32>, MaskedStats);
        let fwd: Vec<Result<Fwd>> = map_in_order(self.cfg.serial, &pieces, |_, p| {
            let (out, cache) = model.forward_cached(&p.seq, Some(&p.plan), true)?;
            let stats = masked_stats(&out.logits, &p.targets, &p.plan)?;
            Ok((out, cache, stats))
        });
        let fwd: Vec<Fwd> = fwd.into_iter().collect::<Result<_>>()?;
        let mut stats = MaskedStats::default();
        for (_, _, s) in &fwd {
            stats.merge(s);
        }
        let loss = match stats.finish() {
            Ok(l) => l,
            Err(Error::NoTargets) => {
                // Nothing was masked: the step still consumes its schedule slot.
                self.state.step += 1;
                let rec = MetricsRecord {
                    step,
                    lr,
                    loss_total: 0.0,
                    loss_per_channel: [None; NUM_CHANNELS],
                    acc_per_channel: [None; NUM_CHANNELS],
                    wallclock_ms: self.wallclock(),
                };
                return self.finish_step(rec);
            }
            Err(e) => return Err(e),
        };
        if !loss.loss.is_finite() {
            return Err(self.abort(step, &batch, format!("loss is {}", loss.loss)));
        }

        let weights = [0, 1, 2, 3].map(|c| stats.cell_weight(c));
        let n_layers = model.n_layers();
        let grads: Vec<Result<EncoderParams<f32>>> = map_in_order(self.cfg.serial, &fwd, |i, (out, cache, _)| {
            let p = &pieces[i];
            let dl = masked_ce_grad(&out.logits, &p.targets, &p.plan, weights)?;
            Ok(model.backward(out, cache, &OutputGrads::from_logits(dl, n_layers)))
        });
        drop(fwd);
        let mut total = EncoderParams::zeros_like(&model.params);
        for g in grads {
            total.add_scaled(&g?, 1.0);
        }
        if let Some(name) = total.first_non_finite() {
            return Err(self.abort(step, &batch, format!("gradient of {name} is not finite")));
        }
        if let Some(clip) = self.cfg.grad_clip {
            let norm = total.sq_norm().sqrt();
            if norm > clip {
                total.scale((clip / norm) as f32);
            }
        }
        self.adam(&total.to_flat(), lr);
        self.state.step += 1;
        let rec = MetricsRecord::new(step, lr, &loss, self.wallclock());
        self.finish_step(rec)
    }

    fn wallclock(&self) -> u64 {
        if self.cfg.serial {
            0
        } else {
            self.started.elapsed().as_millis() as u64
        }
    }

    fn adam(&mut self, grad: &[f32], lr: f64) {
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let t = (self.state.step + 1) as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let mut flat = self.state.model.params.to_flat();
        let st = &mut self.state;
        for i in 0..flat.len() {
            let g = f64::from(grad[i]);
            let m = b1 * f64::from(st.m[i]) + (1.0 - b1) * g;
            let v = b2 * f64::from(st.v[i]) + (1.0 - b2) * g * g;
            st.m[i] = m as f32;
            st.v[i] = v as f32;
            let update = lr * (m / c1) / ((v / c2).sqrt() + eps);
            flat[i] = (f64::from(flat[i]) - update) as f32;
        }
        st.model.params.set_flat(&flat);
    }

    fn finish_step(&mut self, rec: MetricsRecord) -> Result<MetricsRecord> {
        self.state.last = Some(rec.clone());
        if let Some(dir) = &self.out_dir {
            let path = dir.join("metrics.jsonl");
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            let line = serde_json::to_string(&rec).expect("metrics serialize");
            writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
            let every = self.cfg.checkpoint_every;
            if every > 0 && self.state.step.is_multiple_of(every) && self.state.step < self.cfg.total_steps {
                self.write_checkpoint(&format!("step_{:06}", self.state.step))?;
            }
        }
        Ok(rec)
    }

    fn write_checkpoint(&self, stem: &str) -> Result<()> {
        let Some(dir) = &self.out_dir else { return Ok(()) };
        save_checkpoint(&self.state.model, dir.join(format!("{stem}.shb")))?;
        self.state.save(dir.join(format!("{stem}.state")))?;
        let echo = serde_json::json!({
            "step": self.state.step,
            "encoder": self.state.model.cfg,
            "train": self.cfg,
        });
        let text = serde_json::to_string_pretty(&echo).expect("config serialize") + "\n";
        atomic_write(&dir.join(format!("{stem}.config.json")), text.as_bytes())
    }

    /// Saves the pre-update model and batch description, then builds the error.
    fn abort(&self, step: usize, batch: &[Piece], why: String) -> Error {
        let Some(dir) = &self.out_dir else {
            return Error::NonFinite(format!("step {step}: {why}"));
        };
        let stem = format!("nan_step_{step:06}");
        let snapshot = dir.join(format!("{stem}.shb"));
        let _ = save_checkpoint(&self.state.model, &snapshot);
        let info = serde_json::json!({ "step": step, "reason": why, "batch": batch });
        let _ = fs::write(dir.join(format!("{stem}.json")), info.to_string());
        Error::NonFinite(format!("step {step}: {why}; snapshot at {}", snapshot.display()))
    }

    /// Steps until `until` (clamped to `total_steps`), calling `on_step` after each.
    pub fn run_until(&mut self, until: usize, mut on_step: impl FnMut(&MetricsRecord)) -> Result<Vec<MetricsRecord>> {
        let until = until.min(self.cfg.total_steps);
        let mut log = Vec::with_capacity(until.saturating_sub(self.state.step));
        while self.state.step < until {
            let rec = self.step()?;
            on_step(&rec);
            log.push(rec);
        }
        Ok(log)
    }

    /// Runs to `total_steps` and writes the final checkpoint.
    pub fn run(&mut self) -> Result<Vec<MetricsRecord>> {
        let log = self.run_until(self.cfg.total_steps, |r| log::debug!("step {} loss {:.4}", r.step, r.loss_total))?;
        self.write_checkpoint("final")?;
        Ok(log)
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub model: Encoder<f32>,
    pub log: Vec<MetricsRecord>,
    pub state: TrainState,
}

/// Pretrains a fresh encoder from scratch.
pub fn pretrain(
    dataset: &[FeatureSequence],
    cluster_models: &[ClusterModel; NUM_CHANNELS],
    enc_cfg: &EncoderConfig,
    train_cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<PretrainOutput> {
    if dataset.is_empty() {
        return Err(Error::Precondition("pretraining needs a non-empty dataset".into()));
    }
    let targets = prepare_targets(dataset, cluster_models, enc_cfg)?;
    let state = TrainState::new(enc_cfg.clone(), train_cfg.seed)?;
    let mut trainer = Trainer::new(train_cfg.clone(), state, dataset, &targets)?;
    if let Some(dir) = out_dir {
        trainer = trainer.with_output(dir)?;
    }
    let log = trainer.run()?;
    Ok(PretrainOutput {
        model: trainer.state.model.clone(),
        log,
        state: trainer.state,
    })
}

/// Masked-prediction loss and accuracy of `model` over a whole dataset, with
/// plans drawn from `seed`.
pub fn evaluate_masked(
    model: &Encoder<f32>,
    data: &[FeatureSequence],
    targets: &[ClusterAssignments],
    mask: &MaskConfig,
    seed: u64,
) -> Result<MaskedLoss> {
    let stats: Vec<Result<MaskedStats>> = data
        .par_iter()
        .zip(targets)
        .enumerate()
        .map(|(i, (seq, tg))| {
            let plan = make_mask_plan_with(seq.len(), mask, derive_seed(seed, "eval.mask", i as u64))?;
            let out = model.forward(seq, Some(&plan))?;
            masked_stats(&out.logits, tg, &plan)
        })
        .collect();
    let mut total = MaskedStats::default();
    for s in stats {
        total.merge(&s?);
    }
    total.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{fit_all, KMeansConfig};
    use crate::featio::{gen_synthetic, ChannelDims, SyntheticSpec};
    use crate::masking::MaskStrategy;

    fn cfg(total: usize) -> TrainConfig {
        TrainConfig {
            total_steps: total,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_anchor_points() {
        let c = cfg(1_000);
        assert_eq!(lr_at(0, &c).unwrap(), 0.0);
        assert_eq!(lr_at(80, &c).unwrap(), 5e-4);
        assert!((lr_at(540, &c).unwrap() - 2.5e-4).abs() < 1e-18);
        assert_eq!(lr_at(1_000, &c).unwrap(), 0.0);
        assert!(matches!(lr_at(1_001, &c), Err(Error::Argument(_))));
        let c = cfg(2_000);
        assert_eq!(lr_at(160, &c).unwrap(), 5e-4);
    }

    #[test]
    fn schedule_peaks_once_and_is_continuous() {
        for total in [10usize, 37, 1_000, 2_000] {
            let c = cfg(total);
            let lrs: Vec<f64> = (0..=total).map(|s| lr_at(s, &c).unwrap()).collect();
            let max = lrs.iter().copied().fold(0.0, f64::max);
            assert_eq!(max, c.peak_lr);
            // Largest jump between neighbours is one warmup or decay increment.
            let warm = c.warmup_steps().max(1) as f64;
            let slope = c.peak_lr / warm.min((total - c.warmup_steps()) as f64);
            for w in lrs.windows(2) {
                assert!((w[1] - w[0]).abs() <= slope * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn packing_examples() {
        let b = make_batches(&[700, 700, 700], 1_500, 3).unwrap();
        let sizes: Vec<usize> = b.iter().map(|b| b.iter().map(Piece::len).sum()).collect();
        assert_eq!(sizes, vec![1_400, 700]);
        let b = make_batches(&[4_000], 1_500, 0).unwrap();
        let sizes: Vec<usize> = b.iter().map(|b| b[0].len()).collect();
        assert_eq!(sizes, vec![1_500, 1_500, 1_000]);
        assert!(make_batches(&[], 10, 0).unwrap().is_empty());
        assert!(make_batches(&[3], 0, 0).is_err());
        assert_eq!(make_batches(&[5, 9, 2, 7], 8, 11).unwrap(), make_batches(&[5, 9, 2, 7], 8, 11).unwrap());
    }

    proptest::proptest! {
        #[test]
        fn every_frame_once_within_budget(
            lengths in proptest::collection::vec(1usize..60, 0..20),
            budget in 1usize..50,
            seed in 0u64..1000,
        ) {
            let batches = make_batches(&lengths, budget, seed).unwrap();
            let mut seen: Vec<Vec<u32>> = lengths.iter().map(|&l| vec![0; l]).collect();
            for b in &batches {
                proptest::prop_assert!(!b.is_empty());
                proptest::prop_assert!(b.iter().map(Piece::len).sum::<usize>() <= budget);
                for p in b {
                    for t in p.start..p.end {
                        seen[p.seq][t] += 1;
                    }
                }
            }
            proptest::prop_assert!(seen.iter().flatten().all(|&n| n == 1));
        }
    }

    fn toy(num_seqs: usize, gestures: usize) -> (Vec<FeatureSequence>, [ClusterModel; 4], EncoderConfig) {
        let dims = ChannelDims([12, 12, 12, 6]);
        let data = gen_synthetic(&SyntheticSpec {
            num_seqs,
            t_range: (30, 40),
            num_latent_gestures: gestures,
            dims,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let k = 8;
        let models = fit_all(&data.sequences, 1.0, &KMeansConfig { k, ..KMeansConfig::default() }).unwrap();
        (data.sequences, models, EncoderConfig::tiny(dims, 16, 1, 2, k))
    }

    fn small_train(total: usize) -> TrainConfig {
        TrainConfig {
            total_steps: total,
            frame_budget: 80,
            peak_lr: 3e-3,
            serial: true,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_returns_the_initialization() {
        let (data, models, enc) = toy(3, 2);
        let out = pretrain(&data, &models, &enc, &small_train(0), None).unwrap();
        let init = TrainState::new(enc, 0).unwrap();
        assert_eq!(out.model, init.model);
        assert!(out.log.is_empty());
    }

    #[test]
    fn k_mismatch_is_a_schema_error() {
        let (data, models, enc) = toy(3, 2);
        let enc = EncoderConfig { k_per_channel: 9, ..enc };
        assert!(matches!(pretrain(&data, &models, &enc, &small_train(1), None), Err(Error::Schema(_))));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (data, models, enc) = toy(6, 2);
        let targets = prepare_targets(&data, &models, &enc).unwrap();
        let tc = small_train(40);
        let mut full = Trainer::new(tc.clone(), TrainState::new(enc.clone(), 0).unwrap(), &data, &targets).unwrap();
        let full_log = full.run_until(40, |_| {}).unwrap();

        let mut first = Trainer::new(tc.clone(), TrainState::new(enc, 0).unwrap(), &data, &targets).unwrap();
        let mut log = first.run_until(20, |_| {}).unwrap();
        let saved = TrainState::decode(&first.state.encode()).unwrap();
        assert_eq!(saved, first.state);
        let mut second = Trainer::new(tc, saved, &data, &targets).unwrap();
        log.extend(second.run_until(40, |_| {}).unwrap());
        assert_eq!(log, full_log);
        assert_eq!(second.state.model, full.state.model);
    }

    #[test]
    fn parallel_and_serial_agree_bitwise() {
        let (data, models, enc) = toy(6, 2);
        let serial = pretrain(&data, &models, &enc, &small_train(10), None).unwrap();
        let par = pretrain(&data, &models, &enc, &TrainConfig { serial: false, ..small_train(10) }, None).unwrap();
        assert_eq!(serial.model, par.model);
        let strip = |l: &[MetricsRecord]| l.iter().map(|r| (r.step, r.loss_total.to_bits())).collect::<Vec<_>>();
        assert_eq!(strip(&serial.log), strip(&par.log));
    }

    #[test]
    fn fresh_model_is_near_chance() {
        let (data, models, enc) = toy(20, 4);
        let targets = prepare_targets(&data, &models, &enc).unwrap();
        let model = TrainState::new(enc, 5).unwrap().model;
        let mask = MaskConfig::default();
        let loss = evaluate_masked(&model, &data, &targets, &mask, 1).unwrap();
        for c in 0..NUM_CHANNELS {
            let n = loss.masked_count[c] as f64;
            // Targets are not uniform, so allow the most frequent label's share.
            let counts = (0..8).map(|j| targets.iter().flat_map(|t| &t.labels).filter(|l| l[c] == j).count());
            let top = counts.max().unwrap() as f64 / targets.iter().map(|t| t.len()).sum::<usize>() as f64;
            let bound = top.max(1.0 / 8.0) + 4.0 * (0.25 / n).sqrt();
            assert!(loss.accuracy[c] <= bound, "channel {c}: {} > {bound}", loss.accuracy[c]);
        }
    }

    #[test]
    fn loss_decreases_under_every_strategy() {
        let (data, models, enc) = toy(12, 3);
        for strategy in MaskStrategy::ALL {
            let tc = TrainConfig {
                mask: MaskConfig { strategy, ..MaskConfig::default() },
                serial: false,
                ..small_train(500)
            };
            let out = pretrain(&data, &models, &enc, &tc, None).unwrap();
            let median = |xs: &[MetricsRecord]| {
                let mut v: Vec<f64> = xs.iter().map(|r| r.loss_total).collect();
                v.sort_by(f64::total_cmp);
                v[v.len() / 2]
            };
            let head = median(&out.log[..50]);
            let tail = median(&out.log[450..]);
            assert!(tail < head, "{strategy:?}: {tail} !< {head}");
        }
    }

    #[test]
    fn artifacts_are_written() {
        let (data, models, enc) = toy(3, 2);
        let dir = tempfile::tempdir().unwrap();
        let tc = TrainConfig { checkpoint_every: 2, ..small_train(5) };
        let out = pretrain(&data, &models, &enc, &tc, Some(dir.path())).unwrap();
        let lines = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 5);
        let first: MetricsRecord = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
        assert_eq!(first.step, 0);
        assert_eq!(first.wallclock_ms, 0);
        for stem in ["step_000002", "step_000004", "final"] {
            assert!(dir.path().join(format!("{stem}.shb")).exists(), "{stem}");
            assert!(dir.path().join(format!("{stem}.config.json")).exists());
        }
        let back = crate::encoder::load_checkpoint(dir.path().join("final.shb")).unwrap();
        assert_eq!(back, out.model);
    }

    #[test]
    fn non_finite_loss_aborts_with_snapshot() {
        let (data, models, enc) = toy(3, 2);
        let targets = prepare_targets(&data, &models, &enc).unwrap();
        let mut state = TrainState::new(enc, 0).unwrap();
        state.model.params.heads[0].bias[0] = f32::NAN;
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(TrainConfig { mask: MaskConfig { ratio: 1.0, ..MaskConfig::default() }, ..small_train(3) }, state, &data, &targets)
            .unwrap()
            .with_output(dir.path())
            .unwrap();
        let err = t.step().unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
        assert!(dir.path().join("nan_step_000000.shb").exists());
    }
}
