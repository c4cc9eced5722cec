//! Rank-1 adapters on every adapted linear map of the encoder.

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, EncoderParams, Linear};
use crate::error::{Error, Result};
use crate::rng::derive_rng;

use crate::encoder::params::fill_normal;

/// One `(b, a)` pair per adapted linear, so that `W_eff = W + b·aᵀ`.
///
/// `b` starts at zero, which makes a fresh set an exact identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraSet {
    pub a: Vec<Vec<f32>>,
    pub b: Vec<Vec<f32>>,
    /// Learning-rate multiplier relative to the heads.
    pub lr_scale: f64,
}

impl LoraSet {
    pub fn new(cfg: &EncoderConfig, seed: u64) -> Self {
        let mut rng = derive_rng(seed, "adapt.lora", 0);
        let shapes = cfg.adapted_linears();
        let a = shapes
            .iter()
            .map(|s| {
                let mut v = vec![0.0f32; s.inp];
                fill_normal(&mut v, 1.0 / (s.inp as f64).sqrt(), &mut rng);
                v
            })
            .collect();
        let b = shapes.iter().map(|s| vec![0.0f32; s.out]).collect();
        LoraSet { a, b, lr_scale: 0.1 }
    }

    /// `Σ (out + in)` over the adapted linears.
    pub fn num_params(&self) -> usize {
        self.a.iter().map(Vec::len).sum::<usize>() + self.b.iter().map(Vec::len).sum::<usize>()
    }

    pub fn check(&self, cfg: &EncoderConfig) -> Result<()> {
        let shapes = cfg.adapted_linears();
        let ok = shapes.len() == self.a.len()
            && shapes.len() == self.b.len()
            && shapes.iter().zip(&self.a).zip(&self.b).all(|((s, a), b)| a.len() == s.inp && b.len() == s.out);
        if ok {
            Ok(())
        } else {
            Err(Error::Schema("adapter shapes do not match the encoder".into()))
        }
    }

    /// A copy of `base` with every adapted weight replaced by `W + b·aᵀ`.
    pub fn materialize(&self, base: &Encoder<f32>) -> Result<Encoder<f32>> {
        self.check(&base.cfg)?;
        let mut eff = base.clone();
        for ((l, a), b) in eff.params.adapted_linears_mut().into_iter().zip(&self.a).zip(&self.b) {
            add_outer(l, b, a);
        }
        Ok(eff)
    }

    /// Adapter gradients from the gradients of the effective weights:
    /// `∂b = ∂W·a` and `∂a = ∂Wᵀ·b`. Returned flat, `a` tensors first.
    pub fn grads_from(&self, weight_grads: &EncoderParams<f32>) -> Vec<f32> {
        let linears = weight_grads.adapted_linears();
        let mut da_all = Vec::with_capacity(self.num_params());
        let mut db_all = Vec::new();
        for ((g, a), b) in linears.into_iter().zip(&self.a).zip(&self.b) {
            let mut da = vec![0.0f64; g.inp];
            for o in 0..g.out {
                let row = &g.weight[o * g.inp..(o + 1) * g.inp];
                let mut db = 0.0f64;
                for i in 0..g.inp {
                    db += f64::from(row[i]) * f64::from(a[i]);
                    da[i] += f64::from(row[i]) * f64::from(b[o]);
                }
                db_all.push(db as f32);
            }
            da_all.extend(da.into_iter().map(|x| x as f32));
        }
        da_all.extend(db_all);
        da_all
    }

    pub fn to_flat(&self) -> Vec<f32> {
        self.a.iter().chain(&self.b).flatten().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f32]) {
        let mut at = 0;
        for v in self.a.iter_mut().chain(self.b.iter_mut()) {
            let n = v.len();
            v.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
    }
}

fn add_outer(l: &mut Linear<f32>, b: &[f32], a: &[f32]) {
    for o in 0..l.out {
        for i in 0..l.inp {
            l.weight[o * l.inp + i] += b[o] * a[i];
        }
    }
}
