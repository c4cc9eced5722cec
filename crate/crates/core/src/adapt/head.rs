//! Mean-pool → batch norm → linear classification heads.

use serde::{Deserialize, Serialize};

use crate::encoder::ops::linear;
use crate::encoder::{Linear, LinearShape};
use crate::error::{Error, Result};
use crate::rng::derive_rng;

/// Classifier over pooled `dim`-wide features.
///
/// Training batches normalize with their own statistics and fold them into
/// the running estimates with `momentum`; evaluation uses the running
/// estimates. A one-row training batch falls back to the running estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub dim: usize,
    pub n_classes: usize,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub linear: Linear<f32>,
    pub label_smoothing: f64,
    pub momentum: f64,
    pub bn_eps: f64,
}

/// Per-batch values kept for [`ClassifierHead::backward`].
#[derive(Debug, Clone)]
pub struct HeadCache {
    rows: usize,
    xhat: Vec<f32>,
    rstd: Vec<f32>,
    batch_stats: bool,
}

/// Gradients of the trainable head tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Descriptor used to build task heads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub n_classes: usize,
}

impl ClassifierHead {
    pub fn new(dim: usize, n_classes: usize, label_smoothing: f64, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::Config(format!("a head needs at least 2 classes, got {n_classes}")));
        }
        if !(0.0..1.0).contains(&label_smoothing) {
            return Err(Error::Config(format!("label smoothing {label_smoothing} outside [0, 1)")));
        }
        if dim == 0 {
            return Err(Error::Config("head input width must be positive".into()));
        }
        let mut rng = derive_rng(seed, "adapt.head", 0);
        Ok(ClassifierHead {
            dim,
            n_classes,
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            linear: Linear::normal(dim, n_classes, 1.0 / (dim as f64).sqrt(), &mut rng),
            label_smoothing,
            momentum: 0.1,
            bn_eps: 1e-5,
        })
    }

    pub fn shape(&self) -> LinearShape {
        LinearShape {
            inp: self.dim,
            out: self.n_classes,
        }
    }

    fn check(&self, pooled: &[f32]) -> Result<usize> {
        if !pooled.len().is_multiple_of(self.dim) {
            return Err(Error::Schema(format!("feature rows are not {} wide", self.dim)));
        }
        Ok(pooled.len() / self.dim)
    }

    fn normalize(&self, pooled: &[f32], mean: &[f32], rstd: &[f32]) -> (Vec<f32>, Vec<f32>) {
        let d = self.dim;
        let mut xhat = vec![0.0; pooled.len()];
        let mut y = vec![0.0; pooled.len()];
        for (r, row) in pooled.chunks_exact(d).enumerate() {
            for j in 0..d {
                let xh = (row[j] - mean[j]) * rstd[j];
                xhat[r * d + j] = xh;
                y[r * d + j] = self.gamma[j] * xh + self.beta[j];
            }
        }
        (xhat, y)
    }

    fn running_rstd(&self) -> Vec<f32> {
        self.running_var.iter().map(|&v| (1.0 / (f64::from(v) + self.bn_eps).sqrt()) as f32).collect()
    }

    /// Logits with running statistics; `pooled` is `rows × dim`.
    pub fn forward_eval(&self, pooled: &[f32]) -> Result<Vec<f32>> {
        self.check(pooled)?;
        let (_, y) = self.normalize(pooled, &self.running_mean, &self.running_rstd());
        Ok(linear(&y, &self.linear))
    }

    /// Logits with batch statistics; updates the running estimates.
    pub fn forward_train(&mut self, pooled: &[f32]) -> Result<(Vec<f32>, HeadCache)> {
        let rows = self.check(pooled)?;
        let d = self.dim;
        if rows < 2 {
            let rstd = self.running_rstd();
            let (xhat, y) = self.normalize(pooled, &self.running_mean, &rstd);
            let logits = linear(&y, &self.linear);
            return Ok((logits, HeadCache { rows, xhat, rstd, batch_stats: false }));
        }
        let n = rows as f64;
        let mut mean = vec![0.0f32; d];
        let mut rstd = vec![0.0f32; d];
        for j in 0..d {
            let m = pooled.chunks_exact(d).map(|r| f64::from(r[j])).sum::<f64>() / n;
            let var = pooled.chunks_exact(d).map(|r| (f64::from(r[j]) - m).powi(2)).sum::<f64>() / n;
            mean[j] = m as f32;
            rstd[j] = (1.0 / (var + self.bn_eps).sqrt()) as f32;
            let mo = self.momentum;
            self.running_mean[j] = ((1.0 - mo) * f64::from(self.running_mean[j]) + mo * m) as f32;
            let unbiased = var * n / (n - 1.0);
            self.running_var[j] = ((1.0 - mo) * f64::from(self.running_var[j]) + mo * unbiased) as f32;
        }
        let (xhat, y) = self.normalize(pooled, &mean, &rstd);
        let logits = linear(&y, &self.linear);
        Ok((logits, HeadCache { rows, xhat, rstd, batch_stats: true }))
    }

    /// Parameter gradients and the gradient at the pooled input.
    pub fn backward(&self, dlogits: &[f32], cache: &HeadCache) -> (HeadGrads, Vec<f32>) {
        let (d, c, rows) = (self.dim, self.n_classes, cache.rows);
        let y: Vec<f32> = cache
            .xhat
            .chunks_exact(d)
            .flat_map(|r| r.iter().enumerate().map(|(j, &x)| self.gamma[j] * x + self.beta[j]))
            .collect();
        let mut lin = Linear::zeros(d, c);
        let dy = crate::encoder::ops::linear_backward(dlogits, &y, &self.linear, &mut lin, true).unwrap();
        let mut g = HeadGrads {
            gamma: vec![0.0; d],
            beta: vec![0.0; d],
            weight: lin.weight,
            bias: lin.bias,
        };
        let mut dxhat = vec![0.0f32; rows * d];
        for r in 0..rows {
            for j in 0..d {
                let i = r * d + j;
                g.gamma[j] += dy[i] * cache.xhat[i];
                g.beta[j] += dy[i];
                dxhat[i] = dy[i] * self.gamma[j];
            }
        }
        let mut dx = vec![0.0f32; rows * d];
        if !cache.batch_stats {
            for r in 0..rows {
                for j in 0..d {
                    dx[r * d + j] = dxhat[r * d + j] * cache.rstd[j];
                }
            }
            return (g, dx);
        }
        let n = rows as f64;
        for j in 0..d {
            let (mut s1, mut s2) = (0.0f64, 0.0f64);
            for r in 0..rows {
                s1 += f64::from(dxhat[r * d + j]);
                s2 += f64::from(dxhat[r * d + j]) * f64::from(cache.xhat[r * d + j]);
            }
            for r in 0..rows {
                let i = r * d + j;
                let v = f64::from(cache.rstd[j]) / n
                    * (n * f64::from(dxhat[i]) - s1 - f64::from(cache.xhat[i]) * s2);
                dx[i] = v as f32;
            }
        }
        (g, dx)
    }

    /// Trainable tensors (gamma, beta, weight, bias) flattened.
    pub fn to_flat(&self) -> Vec<f32> {
        [&self.gamma[..], &self.beta, &self.linear.weight, &self.linear.bias].concat()
    }

    pub fn set_flat(&mut self, flat: &[f32]) {
        let d = self.dim;
        let w = self.linear.weight.len();
        self.gamma.copy_from_slice(&flat[..d]);
        self.beta.copy_from_slice(&flat[d..2 * d]);
        self.linear.weight.copy_from_slice(&flat[2 * d..2 * d + w]);
        self.linear.bias.copy_from_slice(&flat[2 * d + w..]);
    }

    pub fn num_trainable(&self) -> usize {
        2 * self.dim + self.linear.weight.len() + self.linear.bias.len()
    }
}

impl HeadGrads {
    pub fn to_flat(&self) -> Vec<f32> {
        [&self.gamma[..], &self.beta, &self.weight, &self.bias].concat()
    }
}

/// Mean over frames of a `len × dim` tensor.
pub fn mean_pool(x: &[f32], dim: usize) -> Vec<f32> {
    let rows = x.len() / dim;
    let mut acc = vec![0.0f64; dim];
    for row in x.chunks_exact(dim) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += f64::from(v);
        }
    }
    acc.into_iter().map(|a| (a / rows as f64) as f32).collect()
}
