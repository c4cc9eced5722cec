//! Downstream adaptation of a pretrained encoder.
//!
//! A [`DownstreamModel`] turns a sequence into one pooled feature vector and
//! feeds it to every head of a [`TaskBank`]. Where the features come from and
//! what gets trained is set by the [`AdaptMode`]:
//!
//! | mode              | features                          | trained                     |
//! |-------------------|-----------------------------------|-----------------------------|
//! | `raw`             | mean of the raw input frames       | heads                       |
//! | `frozen-last`     | mean of the top layer              | heads                       |
//! | `frozen-weighted` | mean of the layer mixture          | heads, mixture              |
//! | `finetune`        | mean of the layer mixture          | heads, mixture, encoder     |
//! | `lora`            | mean of the layer mixture          | heads, mixture, rank-1 `b·aᵀ` |
//!
//! Fine-tuning re-draws the last transformer block first. Pooling is applied
//! after the mixture; since both are linear this equals mixing pooled layers.

pub mod export;
pub mod head;
pub mod lora;
pub mod metrics;
pub mod mixture;
pub mod phono;

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::checkpoint::atomic_write;
use crate::encoder::{load_checkpoint, save_checkpoint, Encoder, EncoderParams, ForwardCache, ForwardOutput, OutputGrads};
use crate::error::{Error, Result};
use crate::featio::FeatureSequence;
use crate::rng::{derive_rng, derive_seed};

pub use export::{export_features, sequence_features, ExportFailure, ExportManifest};
pub use head::{mean_pool, ClassifierHead, HeadCache, HeadGrads, TaskSpec};
pub use lora::LoraSet;
pub use metrics::{rank_of, recall_at_k, smoothed_ce, smoothed_ce_floor};
pub use mixture::{weighted_features, weighted_features_backward, LayerWeights};
pub use phono::{
    load_task_table, phonological_tasks, read_label_file, write_label_file, LabelRecord, PhonoDataset,
    PHONOLOGICAL_FEATURES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptMode {
    /// Baseline without an encoder.
    Raw,
    FrozenLast,
    FrozenWeighted,
    Finetune,
    Lora,
}

impl AdaptMode {
    pub const ALL: [AdaptMode; 5] = [
        AdaptMode::Raw,
        AdaptMode::FrozenLast,
        AdaptMode::FrozenWeighted,
        AdaptMode::Finetune,
        AdaptMode::Lora,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdaptMode::Raw => "raw",
            AdaptMode::FrozenLast => "frozen-last",
            AdaptMode::FrozenWeighted => "frozen-weighted",
            AdaptMode::Finetune => "finetune",
            AdaptMode::Lora => "lora",
        }
    }

    pub fn parse(s: &str) -> Option<AdaptMode> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    fn mixes_layers(self) -> bool {
        matches!(self, AdaptMode::FrozenWeighted | AdaptMode::Finetune | AdaptMode::Lora)
    }

    /// Whether gradients flow into the encoder (or its adapters).
    fn trains_encoder(self) -> bool {
        matches!(self, AdaptMode::Finetune | AdaptMode::Lora)
    }
}

/// Task heads sharing one encoder.
#[derive(Debug)]
pub struct TaskBank {
    pub tasks: Vec<(String, ClassifierHead)>,
    /// Per-task loss weights; the total loss is their weighted sum.
    pub loss_weights: Vec<f64>,
    forward_calls: AtomicUsize,
}

impl Clone for TaskBank {
    fn clone(&self) -> Self {
        TaskBank {
            tasks: self.tasks.clone(),
            loss_weights: self.loss_weights.clone(),
            forward_calls: AtomicUsize::new(self.forward_calls()),
        }
    }
}

impl PartialEq for TaskBank {
    fn eq(&self, other: &Self) -> bool {
        self.tasks == other.tasks && self.loss_weights == other.loss_weights
    }
}

impl TaskBank {
    /// One head per task, equally weighted.
    pub fn new(specs: &[TaskSpec], dim: usize, label_smoothing: f64, seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("a task bank needs at least one task".into()));
        }
        let tasks = specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let head = ClassifierHead::new(dim, s.n_classes, label_smoothing, derive_seed(seed, "adapt.task", i as u64))
                    .map_err(|e| Error::Config(format!("task {}: {e}", s.name)))?;
                Ok((s.name.clone(), head))
            })
            .collect::<Result<_>>()?;
        Ok(TaskBank {
            tasks,
            loss_weights: vec![1.0; specs.len()],
            forward_calls: AtomicUsize::new(0),
        })
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.tasks.len() || weights.iter().any(|w| !(*w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("loss weights must be non-negative, one per task, with a positive sum".into()));
        }
        self.loss_weights = weights;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Encoder forward passes run on behalf of this bank.
    pub fn forward_calls(&self) -> usize {
        self.forward_calls.load(Ordering::Relaxed)
    }

    pub fn reset_forward_calls(&self) {
        self.forward_calls.store(0, Ordering::Relaxed);
    }

    fn count_forward(&self) {
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
    }
}

/// Sequences with one optional label per task.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub sequences: Vec<FeatureSequence>,
    pub labels: Vec<Vec<Option<u32>>>,
}

impl LabeledSet {
    /// A single-task set.
    pub fn single(sequences: Vec<FeatureSequence>, labels: Vec<u32>) -> Self {
        LabeledSet {
            sequences,
            labels: labels.into_iter().map(|l| vec![Some(l)]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn validate(&self, bank: &TaskBank) -> Result<()> {
        if self.labels.len() != self.sequences.len() {
            return Err(Error::Schema(format!(
                "{} sequences but {} label rows",
                self.sequences.len(),
                self.labels.len()
            )));
        }
        for (i, row) in self.labels.iter().enumerate() {
            if row.len() != bank.len() {
                return Err(Error::Schema(format!("example {i} has {} labels for {} tasks", row.len(), bank.len())));
            }
            for (l, (name, head)) in row.iter().zip(&bank.tasks) {
                if let Some(l) = l {
                    if *l as usize >= head.n_classes {
                        return Err(Error::Data(format!(
                            "example {i}: label {l} outside the {} classes of task {name}",
                            head.n_classes
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DownstreamConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// L2 penalty added to the gradients of every tensor except the mixture logits.
    pub weight_decay: f64,
    pub label_smoothing: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub lora_lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            epochs: 125,
            batch_size: 128,
            lr: 1e-4,
            weight_decay: 1e-4,
            label_smoothing: 0.1,
            patience: 10,
            lora_lr_scale: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl DownstreamConfig {
    /// Fine-tuning settings for the phonological heads: no weight decay.
    pub fn phonological() -> Self {
        DownstreamConfig {
            weight_decay: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.lora_lr_scale > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rates must be positive and weight decay non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        Ok(())
    }
}

/// Width of the pooled features a mode produces.
pub fn feature_dim(encoder: &Encoder<f32>, mode: AdaptMode) -> usize {
    match mode {
        AdaptMode::Raw => encoder.cfg.channel_dims.total(),
        _ => encoder.cfg.model_dim,
    }
}

/// An encoder, its adaptation state and the task heads.
#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamModel {
    pub mode: AdaptMode,
    pub encoder: Encoder<f32>,
    pub layer_weights: LayerWeights,
    pub lora: Option<LoraSet>,
    pub bank: TaskBank,
}

/// Pooled features of one example and what its backward pass needs.
struct Pooled {
    /// Pooled tensor per layer (a single entry for `raw`).
    layers: Vec<Vec<f32>>,
    fwd: Option<(ForwardOutput<f32>, ForwardCache<f32>)>,
}

impl DownstreamModel {
    pub fn new(encoder: Encoder<f32>, mode: AdaptMode, bank: TaskBank, seed: u64) -> Result<Self> {
        let dim = feature_dim(&encoder, mode);
        for (name, head) in &bank.tasks {
            if head.dim != dim {
                return Err(Error::Schema(format!("head {name} takes {} features, {} gives {dim}", head.dim, mode.name())));
            }
        }
        let lora = (mode == AdaptMode::Lora).then(|| LoraSet::new(&encoder.cfg, derive_seed(seed, "adapt.lora", 0)));
        let layer_weights = LayerWeights::uniform(encoder.n_layers());
        Ok(DownstreamModel {
            mode,
            encoder,
            layer_weights,
            lora,
            bank,
        })
    }

    /// The encoder with adapters folded in.
    pub fn effective_encoder(&self) -> Result<std::borrow::Cow<'_, Encoder<f32>>> {
        match (&self.lora, self.mode) {
            (Some(l), AdaptMode::Lora) => Ok(std::borrow::Cow::Owned(l.materialize(&self.encoder)?)),
            (None, AdaptMode::Lora) => Err(Error::Config("lora mode needs an attached adapter set".into())),
            (Some(_), m) => Err(Error::Config(format!("{} mode cannot carry adapters", m.name()))),
            (None, _) => Ok(std::borrow::Cow::Borrowed(&self.encoder)),
        }
    }

    fn pool(&self, enc: &Encoder<f32>, seq: &FeatureSequence, keep: bool) -> Result<Pooled> {
        if self.mode == AdaptMode::Raw {
            if seq.dims() != enc.cfg.channel_dims {
                return Err(Error::Schema("sequence dims differ from the encoder's".into()));
            }
            return Ok(Pooled {
                layers: vec![mean_pool(seq.data(), seq.dims().total())],
                fwd: None,
            });
        }
        self.bank.count_forward();
        let (out, cache) = enc.forward_cached(seq, None, false)?;
        let d = enc.cfg.model_dim;
        let layers = out.layers.iter().map(|l| mean_pool(l, d)).collect();
        Ok(Pooled {
            layers,
            fwd: keep.then_some((out, cache)),
        })
    }

    fn mix(&self, p: &Pooled) -> Result<Vec<f32>> {
        match self.mode {
            AdaptMode::Raw => Ok(p.layers[0].clone()),
            AdaptMode::FrozenLast => Ok(p.layers.last().unwrap().clone()),
            _ => weighted_features(&p.layers, &self.layer_weights),
        }
    }

    /// Pooled (and mixed) features of one sequence.
    pub fn features(&self, seq: &FeatureSequence) -> Result<Vec<f32>> {
        let enc = self.effective_encoder()?;
        self.mix(&self.pool(&enc, seq, false)?)
    }

    /// Evaluation-mode logits of every task for one sequence.
    pub fn logits(&self, seq: &FeatureSequence) -> Result<Vec<Vec<f32>>> {
        let f = self.features(seq)?;
        self.bank.tasks.iter().map(|(_, h)| h.forward_eval(&f)).collect()
    }

    fn features_all(&self, seqs: &[FeatureSequence]) -> Result<Vec<Pooled>> {
        let enc = self.effective_encoder()?;
        seqs.par_iter().map(|s| self.pool(&enc, s, false)).collect()
    }

    fn evaluate_pooled(&self, pooled: &[Pooled], data: &LabeledSet) -> Result<EvalReport> {
        let feats: Vec<Vec<f32>> = pooled.iter().map(|p| self.mix(p)).collect::<Result<_>>()?;
        let mut tasks = Vec::with_capacity(self.bank.len());
        for (t, (name, head)) in self.bank.tasks.iter().enumerate() {
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for (f, lab) in feats.iter().zip(&data.labels) {
                if let Some(l) = lab[t] {
                    rows.push(head.forward_eval(f)?);
                    labels.push(l);
                }
            }
            let r = |k| recall_at_k(&rows, &labels, k);
            tasks.push(TaskReport {
                name: name.clone(),
                n: rows.len(),
                recall_at_1: r(1)?,
                recall_at_5: r(5)?,
                recall_at_10: r(10)?,
            });
        }
        let mean = tasks.iter().map(|t| t.recall_at_1).sum::<f64>() / tasks.len() as f64;
        Ok(EvalReport {
            mode: self.mode,
            tasks,
            mean_recall_at_1: mean,
        })
    }

    /// Recall@{1,5,10} of every task on `data`.
    pub fn evaluate(&self, data: &LabeledSet) -> Result<EvalReport> {
        data.validate(&self.bank)?;
        let pooled = self.features_all(&data.sequences)?;
        self.evaluate_pooled(&pooled, data)
    }

    /// Writes `encoder.shb` and `adapter.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_checkpoint(&self.encoder, dir.join("encoder.shb"))?;
        let adapter = AdapterFile {
            mode: self.mode,
            layer_weights: self.layer_weights.clone(),
            lora: self.lora.clone(),
            tasks: self.bank.tasks.clone(),
            loss_weights: self.bank.loss_weights.clone(),
        };
        let json = serde_json::to_vec_pretty(&adapter).map_err(|e| Error::Format(e.to_string()))?;
        atomic_write(&dir.join("adapter.json"), &json)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let encoder = load_checkpoint(dir.join("encoder.shb"))?;
        let path = dir.join("adapter.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let a: AdapterFile = serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let bank = TaskBank {
            tasks: a.tasks,
            loss_weights: a.loss_weights,
            forward_calls: AtomicUsize::new(0),
        };
        let model = DownstreamModel {
            mode: a.mode,
            encoder,
            layer_weights: a.layer_weights,
            lora: a.lora,
            bank,
        };
        let dim = feature_dim(&model.encoder, model.mode);
        if model.layer_weights.raw.len() != model.encoder.n_layers() || model.bank.tasks.iter().any(|(_, h)| h.dim != dim) {
            return Err(Error::Schema(format!("{} does not fit the saved encoder", path.display())));
        }
        model.effective_encoder()?;
        Ok(model)
    }
}

/// On-disk form of everything but the encoder weights.
#[derive(Serialize, Deserialize)]
struct AdapterFile {
    mode: AdaptMode,
    layer_weights: LayerWeights,
    lora: Option<LoraSet>,
    tasks: Vec<(String, ClassifierHead)>,
    loss_weights: Vec<f64>,
}

/// Logits of one head for one sequence in evaluation mode.
pub fn classify(
    encoder: &Encoder<f32>,
    head: &ClassifierHead,
    seq: &FeatureSequence,
    mode: AdaptMode,
    layer_weights: &LayerWeights,
    lora: Option<&LoraSet>,
) -> Result<Vec<f32>> {
    let bank = TaskBank {
        tasks: vec![("task".into(), head.clone())],
        loss_weights: vec![1.0],
        forward_calls: AtomicUsize::new(0),
    };
    let mut model = DownstreamModel::new(encoder.clone(), mode, bank, 0)?;
    model.layer_weights = layer_weights.clone();
    model.lora = lora.cloned();
    Ok(model.logits(seq)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub name: String,
    pub n: usize,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: AdaptMode,
    pub tasks: Vec<TaskReport>,
    pub mean_recall_at_1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_recall_at_1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedDownstream {
    /// The snapshot with the best validation recall.
    pub model: DownstreamModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Adam with an L2 penalty folded into the gradient.
#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f32], grad: &[f32], lr: f64, decay: f64, cfg: &DownstreamConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = f64::from(grad[i]) + decay * f64::from(params[i]);
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let upd = lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.eps);
            params[i] = (f64::from(params[i]) - upd) as f32;
        }
    }
}

struct Optimizers {
    heads: Vec<Adam>,
    mixture: Adam,
    encoder: Option<Adam>,
    lora: Option<Adam>,
}

/// Trains the heads (and whatever else `mode` unlocks) with early stopping on
/// the mean validation recall@1.
pub fn train_downstream(
    encoder: &Encoder<f32>,
    bank: TaskBank,
    train: &LabeledSet,
    val: &LabeledSet,
    mode: AdaptMode,
    cfg: &DownstreamConfig,
) -> Result<TrainedDownstream> {
    cfg.validate()?;
    if val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    train.validate(&bank)?;
    val.validate(&bank)?;
    let mut model = DownstreamModel::new(encoder.clone(), mode, bank, cfg.seed)?;
    if let Some(l) = model.lora.as_mut() {
        l.lr_scale = cfg.lora_lr_scale;
    }
    if mode == AdaptMode::Finetune {
        model.encoder.reinit_last_block(derive_seed(cfg.seed, "adapt.reinit", 0));
    }
    let mut opt = Optimizers {
        heads: model.bank.tasks.iter().map(|(_, h)| Adam::new(h.num_trainable())).collect(),
        mixture: Adam::new(model.layer_weights.len()),
        encoder: (mode == AdaptMode::Finetune).then(|| Adam::new(model.encoder.params.num_params())),
        lora: model.lora.as_ref().map(|l| Adam::new(l.num_params())),
    };

    // Frozen features never change, so pool them once.
    let frozen = !mode.trains_encoder();
    let train_cache = if frozen { Some(model.features_all(&train.sequences)?) } else { None };
    let val_cache = if frozen { Some(model.features_all(&val.sequences)?) } else { None };

    let mut best: Option<(f64, usize, DownstreamModel)> = None;
    let mut history = Vec::new();
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, "adapt.epoch", epoch as u64));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            loss_sum += train_batch(&mut model, &mut opt, train, idx, train_cache.as_deref(), cfg)?;
            batches += 1;
        }
        let report = match &val_cache {
            Some(c) => model.evaluate_pooled(c, val)?,
            None => model.evaluate(val)?,
        };
        let score = report.mean_recall_at_1;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_recall_at_1: score,
        });
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_epoch, snapshot) = best.expect("at least one epoch ran");
    snapshot.bank.forward_calls.store(model.bank.forward_calls(), Ordering::Relaxed);
    Ok(TrainedDownstream {
        model: snapshot,
        history,
        best_epoch,
    })
}

/// One optimizer step on the examples `idx`; returns the batch loss.
fn train_batch(
    model: &mut DownstreamModel,
    opt: &mut Optimizers,
    data: &LabeledSet,
    idx: &[usize],
    cache: Option<&[Pooled]>,
    cfg: &DownstreamConfig,
) -> Result<f64> {
    let enc = model.effective_encoder()?.into_owned();
    let fresh: Vec<Pooled>;
    let pooled: Vec<&Pooled> = match cache {
        Some(c) => idx.iter().map(|&i| &c[i]).collect(),
        None => {
            let m = &*model;
            fresh = idx
                .par_iter()
                .map(|&i| m.pool(&enc, &data.sequences[i], true))
                .collect::<Result<_>>()?;
            fresh.iter().collect()
        }
    };
    let feats: Vec<Vec<f32>> = pooled.iter().map(|p| model.mix(p)).collect::<Result<_>>()?;
    let dim = feats[0].len();

    let mut total = 0.0;
    let mut dfeat = vec![vec![0.0f32; dim]; idx.len()];
    let mut head_grads = Vec::with_capacity(model.bank.len());
    let weights = model.bank.loss_weights.clone();
    for (t, (_, head)) in model.bank.tasks.iter_mut().enumerate() {
        let rows: Vec<usize> = (0..idx.len()).filter(|&r| data.labels[idx[r]][t].is_some()).collect();
        if rows.is_empty() || weights[t] == 0.0 {
            head_grads.push(None);
            continue;
        }
        let x: Vec<f32> = rows.iter().flat_map(|&r| feats[r].iter().copied()).collect();
        let (logits, hc) = head.forward_train(&x)?;
        let scale = weights[t] / rows.len() as f64;
        let mut dlogits = Vec::with_capacity(logits.len());
        for (row, &r) in logits.chunks_exact(head.n_classes).zip(&rows) {
            let label = data.labels[idx[r]][t].unwrap() as usize;
            let (l, g) = smoothed_ce(row, label, head.label_smoothing);
            total += scale * l;
            dlogits.extend(g.iter().map(|&v| (f64::from(v) * scale) as f32));
        }
        let (g, dx) = head.backward(&dlogits, &hc);
        for (k, &r) in rows.iter().enumerate() {
            for (a, &b) in dfeat[r].iter_mut().zip(&dx[k * dim..(k + 1) * dim]) {
                *a += b;
            }
        }
        head_grads.push(Some(g));
    }
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("downstream loss is {total}")));
    }

    // Mixture logits and per-layer gradients.
    let mode = model.mode;
    let mut dmix = vec![0.0f64; model.layer_weights.len()];
    let mut dlayers: Vec<Vec<Vec<f32>>> = Vec::with_capacity(idx.len());
    for (p, df) in pooled.iter().zip(&dfeat) {
        match mode {
            AdaptMode::Raw => dlayers.push(Vec::new()),
            AdaptMode::FrozenLast => {
                let mut v = vec![Vec::new(); p.layers.len()];
                *v.last_mut().unwrap() = df.clone();
                dlayers.push(v);
            }
            _ => {
                let (dl, dr) = weighted_features_backward(&p.layers, &model.layer_weights, df)?;
                for (a, b) in dmix.iter_mut().zip(dr) {
                    *a += b;
                }
                dlayers.push(dl);
            }
        }
    }

    let enc_grad = if mode.trains_encoder() {
        let grads: Vec<EncoderParams<f32>> = pooled
            .par_iter()
            .zip(&dlayers)
            .map(|(p, dl)| {
                let (out, fc) = p.fwd.as_ref().expect("kept for backward");
                let len = out.len as f32;
                let d = enc.cfg.model_dim;
                let layers = dl
                    .iter()
                    .map(|g| {
                        (!g.is_empty()).then(|| {
                            let per_frame: Vec<f32> = g.iter().map(|v| v / len).collect();
                            debug_assert_eq!(per_frame.len(), d);
                            per_frame.repeat(out.len)
                        })
                    })
                    .collect();
                enc.backward(out, fc, &OutputGrads { logits: None, layers })
            })
            .collect();
        let mut sum = EncoderParams::zeros_like(&enc.params);
        for g in &grads {
            sum.add_scaled(g, 1.0);
        }
        Some(sum)
    } else {
        None
    };

    // Updates.
    for ((_, head), (g, adam)) in model.bank.tasks.iter_mut().zip(head_grads.iter().zip(&mut opt.heads)) {
        if let Some(g) = g {
            let mut flat = head.to_flat();
            adam.step(&mut flat, &g.to_flat(), cfg.lr, cfg.weight_decay, cfg);
            head.set_flat(&flat);
        }
    }
    if mode.mixes_layers() {
        let g: Vec<f32> = dmix.iter().map(|&x| x as f32).collect();
        opt.mixture.step(&mut model.layer_weights.raw, &g, cfg.lr, 0.0, cfg);
    }
    if let Some(g) = enc_grad {
        match mode {
            AdaptMode::Finetune => {
                let mut flat = model.encoder.params.to_flat();
                opt.encoder.as_mut().unwrap().step(&mut flat, &g.to_flat(), cfg.lr, cfg.weight_decay, cfg);
                model.encoder.params.set_flat(&flat);
            }
            AdaptMode::Lora => {
                let lora = model.lora.as_mut().unwrap();
                let grad = lora.grads_from(&g);
                let mut flat = lora.to_flat();
                let lr = cfg.lr * lora.lr_scale;
                opt.lora.as_mut().unwrap().step(&mut flat, &grad, lr, cfg.weight_decay, cfg);
                lora.set_flat(&flat);
            }
            _ => unreachable!("only encoder-training modes produce encoder gradients"),
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests;
