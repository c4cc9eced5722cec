//! Offline per-channel k-means producing the pseudo-label targets.
//!
//! Seeding is k-means++ driven by the crate PRNG (see [`crate::rng`]);
//! refinement is Lloyd's algorithm on squared Euclidean distance with
//! lowest-index tie breaking. A cluster that loses all members is re-seeded at
//! the point currently farthest from its centroid.

use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featio::{Channel, FeatureSequence, NUM_CHANNELS};
use crate::rng::{derive_rng, derive_seed};

pub const KMC_MAGIC: &[u8; 4] = b"KMC1";
pub const KMC_VERSION: u32 = 1;

/// Points processed per parallel assignment task.
const ASSIGN_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Convergence threshold on the largest centroid displacement.
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest final inertia wins.
    pub n_init: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k: 256,
            seed: 0,
            max_iters: 100,
            tol: 1e-6,
            n_init: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub channel: Channel,
    pub k: usize,
    pub dim: usize,
    /// `k × dim`, row-major.
    pub centroids: Vec<f32>,
    pub trained_on_fraction: f64,
}

/// Outcome of one [`fit_kmeans`] call.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub model: ClusterModel,
    pub inertia: f64,
    /// Inertia after every assignment step of the winning restart.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Labels of the training points under the final centroids.
    pub labels: Vec<u32>,
}

/// Per-frame pseudo-labels `(face, left hand, right hand, pose)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignments {
    pub labels: Vec<[u32; NUM_CHANNELS]>,
}

impl ClusterAssignments {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, t: usize, channel: Channel) -> u32 {
        self.labels[t][channel.index()]
    }

    pub fn slice(&self, start: usize, end: usize) -> ClusterAssignments {
        ClusterAssignments {
            labels: self.labels[start..end].to_vec(),
        }
    }
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &c)| {
            let d = f64::from(x) - c;
            d * d
        })
        .sum()
}

/// Nearest centroid by squared distance; the lowest index wins ties.
fn nearest(point: &[f32], centroids: &[f64], dim: usize) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j as u32, d);
        }
    }
    best
}

fn assign_points(data: &[f32], dim: usize, centroids: &[f64]) -> (Vec<u32>, Vec<f64>) {
    let pairs: Vec<(u32, f64)> = data
        .par_chunks(dim * ASSIGN_CHUNK)
        .flat_map_iter(|block| block.chunks_exact(dim).map(|p| nearest(p, centroids, dim)).collect::<Vec<_>>())
        .collect();
    pairs.into_iter().unzip()
}

fn kmeans_pp(data: &[f32], dim: usize, k: usize, seed: u64) -> Vec<f64> {
    let n = data.len() / dim;
    let mut rng = crate::rng::rng_from_seed(seed);
    let point = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids: Vec<f64> = point(first).iter().map(|&v| f64::from(v)).collect();
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), &centroids)).collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `acc` a hair below `target`.
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // Every point coincides with a centroid; take an unused one.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[next] = true;
        let c: Vec<f64> = point(next).iter().map(|&v| f64::from(v)).collect();
        for (i, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(point(i), &c));
        }
        centroids.extend(c);
    }
    centroids
}

struct Run {
    centroids: Vec<f64>,
    history: Vec<f64>,
    iterations: usize,
    converged: bool,
    labels: Vec<u32>,
    inertia: f64,
}

fn lloyd(data: &[f32], dim: usize, k: usize, mut centroids: Vec<f64>, cfg: &KMeansConfig) -> Result<Run> {
    let n = data.len() / dim;
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let (labels, dists) = assign_points(data, dim, &centroids);
        let inertia: f64 = dists.iter().sum();
        if let Some(&prev) = history.last() {
            // Lloyd steps never increase inertia; allow for summation rounding.
            if inertia > prev * (1.0 + 1e-12) + 1e-12 {
                return Err(Error::NonFinite(format!(
                    "k-means inertia rose from {prev} to {inertia} at iteration {iterations}"
                )));
            }
        }
        if !inertia.is_finite() {
            return Err(Error::NonFinite("k-means inertia is not finite".into()));
        }
        history.push(inertia);
        if converged || iterations == cfg.max_iters {
            return Ok(Run {
                centroids,
                history,
                iterations,
                converged,
                labels,
                inertia,
            });
        }

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &l) in data.chunks_exact(dim).zip(&labels) {
            let l = l as usize;
            counts[l] += 1;
            for (s, &v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(p) {
                *s += f64::from(v);
            }
        }
        let mut next = centroids.clone();
        let mut by_distance: Option<Vec<usize>> = None;
        let mut repaired = 0;
        for j in 0..k {
            let row = &mut next[j * dim..(j + 1) * dim];
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                for (c, s) in row.iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *c = s * inv;
                }
            } else {
                let order = by_distance.get_or_insert_with(|| {
                    let mut idx: Vec<usize> = (0..n).collect();
                    idx.sort_by(|&a, &b| dists[b].total_cmp(&dists[a]).then(a.cmp(&b)));
                    idx
                });
                let src = order[repaired.min(n - 1)];
                repaired += 1;
                for (c, &v) in row.iter_mut().zip(&data[src * dim..(src + 1) * dim]) {
                    *c = f64::from(v);
                }
            }
        }
        let shift = centroids
            .chunks_exact(dim)
            .zip(next.chunks_exact(dim))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        iterations += 1;
        converged = shift < cfg.tol && repaired == 0;
    }
}

/// Fits `cfg.k` centroids to the row-major `n × dim` matrix `data`.
pub fn fit_kmeans(data: &[f32], dim: usize, channel: Channel, cfg: &KMeansConfig) -> Result<KMeansFit> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::Schema(format!(
            "{} values do not form vectors of width {dim}",
            data.len()
        )));
    }
    let n = data.len() / dim;
    if cfg.k == 0 || n < cfg.k {
        return Err(Error::InsufficientData {
            needed: cfg.k.max(1),
            got: n,
        });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means input contains NaN or Inf".into()));
    }
    let mut best: Option<Run> = None;
    for restart in 0..cfg.n_init.max(1) {
        let init = kmeans_pp(data, dim, cfg.k, derive_seed(cfg.seed, "kmeans.init", restart as u64));
        let run = lloyd(data, dim, cfg.k, init, cfg)?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let run = best.expect("at least one restart");
    Ok(KMeansFit {
        model: ClusterModel {
            channel,
            k: cfg.k,
            dim,
            centroids: run.centroids.iter().map(|&c| c as f32).collect(),
            trained_on_fraction: 1.0,
        },
        inertia: run.inertia,
        inertia_history: run.history,
        iterations: run.iterations,
        converged: run.converged,
        labels: run.labels,
    })
}

/// Same as [`fit_kmeans`] for a list of vectors, checking they share a width.
pub fn fit_kmeans_vectors(points: &[Vec<f32>], channel: Channel, cfg: &KMeansConfig) -> Result<KMeansFit> {
    let dim = points.first().map_or(0, Vec::len);
    if let Some(bad) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::Schema(format!("vector of width {} among width-{dim} data", bad.len())));
    }
    if points.is_empty() {
        return Err(Error::InsufficientData { needed: cfg.k.max(1), got: 0 });
    }
    fit_kmeans(&points.concat(), dim, channel, cfg)
}

/// Draws `ceil(fraction · frames)` frames of `channel` uniformly without
/// replacement across the whole dataset, returned in dataset order.
pub fn sample_channel_frames(
    dataset: &[FeatureSequence],
    channel: Channel,
    fraction: f64,
    seed: u64,
) -> Result<Vec<f32>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!("sampling fraction {fraction} outside (0, 1]")));
    }
    let cells: Vec<(usize, usize)> = dataset
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| (0..seq.len()).map(move |t| (s, t)))
        .collect();
    let take = ((cells.len() as f64 * fraction).ceil() as usize).min(cells.len());
    let mut rng = derive_rng(seed, "kmeans.subsample", channel.index() as u64);
    let mut picked = index::sample(&mut rng, cells.len(), take).into_vec();
    picked.sort_unstable();
    let mut out = Vec::new();
    for i in picked {
        let (s, t) = cells[i];
        out.extend_from_slice(dataset[s].channel(t, channel));
    }
    Ok(out)
}

/// Fits one channel's model on a seeded frame subsample of `dataset`.
pub fn fit_channel(
    dataset: &[FeatureSequence],
    channel: Channel,
    fraction: f64,
    cfg: &KMeansConfig,
) -> Result<KMeansFit> {
    let dim = dataset
        .first()
        .map(|s| s.dims().dim(channel))
        .ok_or(Error::InsufficientData { needed: cfg.k.max(1), got: 0 })?;
    if let Some(bad) = dataset.iter().find(|s| s.dims().dim(channel) != dim) {
        return Err(Error::Schema(format!(
            "{channel} width {} differs from {dim}",
            bad.dims().dim(channel)
        )));
    }
    let seed = derive_seed(cfg.seed, "kmeans.channel", channel.index() as u64);
    let data = sample_channel_frames(dataset, channel, fraction, seed)?;
    let mut fit = fit_kmeans(&data, dim, channel, &KMeansConfig { seed, ..cfg.clone() })?;
    fit.model.trained_on_fraction = fraction;
    Ok(fit)
}

/// Fits all four channel models.
pub fn fit_all(dataset: &[FeatureSequence], fraction: f64, cfg: &KMeansConfig) -> Result<[ClusterModel; NUM_CHANNELS]> {
    let mut models = Vec::with_capacity(NUM_CHANNELS);
    for ch in Channel::ALL {
        models.push(fit_channel(dataset, ch, fraction, cfg)?.model);
    }
    Ok(models.try_into().expect("four channels"))
}

impl ClusterModel {
    pub fn centroid(&self, j: usize) -> &[f32] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.dim == 0 || self.centroids.len() != self.k * self.dim {
            return Err(Error::Schema(format!(
                "cluster model with k={} dim={} holds {} values",
                self.k,
                self.dim,
                self.centroids.len()
            )));
        }
        if self.centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("centroid contains NaN or Inf".into()));
        }
        Ok(())
    }

    /// Label of a single vector.
    pub fn assign_vector(&self, v: &[f32]) -> Result<u32> {
        if v.len() != self.dim {
            return Err(Error::Schema(format!("vector width {} vs model width {}", v.len(), self.dim)));
        }
        let mut best = (0u32, f64::INFINITY);
        for j in 0..self.k {
            let d: f64 = v
                .iter()
                .zip(self.centroid(j))
                .map(|(&a, &b)| {
                    let d = f64::from(a) - f64::from(b);
                    d * d
                })
                .sum();
            if d < best.1 {
                best = (j as u32, d);
            }
        }
        Ok(best.0)
    }

    /// Labels every frame of `seq` on this model's channel.
    pub fn assign(&self, seq: &FeatureSequence) -> Result<Vec<u32>> {
        let d = seq.dims().dim(self.channel);
        if d != self.dim {
            return Err(Error::Schema(format!(
                "{} features have width {d}, model expects {}",
                self.channel, self.dim
            )));
        }
        (0..seq.len()).map(|t| self.assign_vector(seq.channel(t, self.channel))).collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(20 + 4 * self.centroids.len());
        out.extend_from_slice(KMC_MAGIC);
        out.extend_from_slice(&KMC_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.channel.index() as u32).to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.centroids {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// Decodes a KMC1 blob. `trained_on_fraction` is not persisted and reads as 1.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(Error::Length { expected: 20, found: bytes.len() as u64 });
        }
        if &bytes[..4] != KMC_MAGIC {
            return Err(Error::Format("bad magic, expected \"KMC1\"".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != KMC_VERSION {
            return Err(Error::Format(format!("unsupported KMC version {}", word(0))));
        }
        let channel = Channel::from_index(word(1) as usize)
            .ok_or_else(|| Error::Schema(format!("unknown channel id {}", word(1))))?;
        let (k, dim) = (word(2) as usize, word(3) as usize);
        let expected = 20 + 4 * (k as u64) * (dim as u64);
        if (bytes.len() as u64) < expected {
            return Err(Error::Length { expected, found: bytes.len() as u64 });
        }
        if (bytes.len() as u64) > expected {
            return Err(Error::Schema("trailing bytes after centroids".into()));
        }
        let centroids = bytes[20..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let model = ClusterModel {
            channel,
            k,
            dim,
            centroids,
            trained_on_fraction: 1.0,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Labels every frame on all four channels.
pub fn assign_all(models: &[ClusterModel; NUM_CHANNELS], seq: &FeatureSequence) -> Result<ClusterAssignments> {
    let mut labels = vec![[0u32; NUM_CHANNELS]; seq.len()];
    for (c, model) in models.iter().enumerate() {
        if model.channel.index() != c {
            return Err(Error::Schema(format!("model {c} is for channel {}", model.channel)));
        }
        for (t, l) in model.assign(seq)?.into_iter().enumerate() {
            labels[t][c] = l;
        }
    }
    Ok(ClusterAssignments { labels })
}

/// Sampled members of one cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterRow {
    pub cluster: u32,
    pub total_members: usize,
    /// `(sequence index, frame index)` pairs in dataset order.
    pub samples: Vec<(usize, usize)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSampleManifest {
    pub channel: Channel,
    pub rows: Vec<ClusterRow>,
}

/// Uniformly samples up to `n_per_cluster` member frames of each requested
/// cluster, for eyeballing what a cluster captures.
pub fn dump_cluster_samples(
    model: &ClusterModel,
    dataset: &[FeatureSequence],
    cluster_ids: &[u32],
    n_per_cluster: usize,
    seed: u64,
) -> Result<ClusterSampleManifest> {
    if let Some(&bad) = cluster_ids.iter().find(|&&c| c as usize >= model.k) {
        return Err(Error::Argument(format!("cluster {bad} out of range for k={}", model.k)));
    }
    let mut members: Vec<Vec<(usize, usize)>> = vec![Vec::new(); model.k];
    for (s, seq) in dataset.iter().enumerate() {
        for (t, l) in model.assign(seq)?.into_iter().enumerate() {
            members[l as usize].push((s, t));
        }
    }
    let rows = cluster_ids
        .iter()
        .map(|&c| {
            let pool = &members[c as usize];
            let mut rng = derive_rng(seed, "dump_clusters", u64::from(c));
            let take = n_per_cluster.min(pool.len());
            let mut picked = index::sample(&mut rng, pool.len(), take).into_vec();
            picked.sort_unstable();
            let warning = pool.is_empty().then(|| {
                warn!("cluster {c} of {} has no members", model.channel);
                format!("cluster {c} has no members")
            });
            ClusterRow {
                cluster: c,
                total_members: pool.len(),
                samples: picked.into_iter().map(|i| pool[i]).collect(),
                warning,
            }
        })
        .collect();
    Ok(ClusterSampleManifest {
        channel: model.channel,
        rows,
    })
}
