//! Parameter containers and the named-tensor registry.
//!
//! Gradients and optimizer moments reuse [`EncoderParams`], so every tensor
//! set in the crate shares one naming scheme:
//!
//! ```text
//! norm.<channel>.{gamma,beta}
//! proj.<channel>.{weight,bias}
//! mask_emb.<channel>
//! fusion.{weight,bias}
//! blocks.<i>.ln1.{gamma,beta}
//! blocks.<i>.attn.{q,k,v,o}.{weight,bias}
//! blocks.<i>.ln2.{gamma,beta}
//! blocks.<i>.ffn.{fc1,fc2}.{weight,bias}
//! heads.<channel>.{weight,bias}
//! ```

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::featio::{Channel, NUM_CHANNELS};
use crate::rng::Rng;
use crate::scalar::{cast_slice, Scalar};

use super::config::EncoderConfig;

/// `y = x·Wᵀ + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<F> {
    pub inp: usize,
    pub out: usize,
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn zeros(inp: usize, out: usize) -> Self {
        Linear {
            inp,
            out,
            weight: vec![F::zero(); inp * out],
            bias: vec![F::zero(); out],
        }
    }

    pub fn normal(inp: usize, out: usize, std: f64, rng: &mut Rng) -> Self {
        let mut l = Self::zeros(inp, out);
        fill_normal(&mut l.weight, std, rng);
        l
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<F> {
    pub gamma: Vec<F>,
    pub beta: Vec<F>,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn identity(dim: usize) -> Self {
        LayerNorm {
            gamma: vec![F::one(); dim],
            beta: vec![F::zero(); dim],
        }
    }

    fn zeros(dim: usize) -> Self {
        LayerNorm {
            gamma: vec![F::zero(); dim],
            beta: vec![F::zero(); dim],
        }
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<F> {
    pub ln1: LayerNorm<F>,
    pub q: Linear<F>,
    pub k: Linear<F>,
    pub v: Linear<F>,
    pub o: Linear<F>,
    pub ln2: LayerNorm<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

impl<F: Scalar> Block<F> {
    pub fn init(cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let (d, f, s) = (cfg.model_dim, cfg.ffn_dim, cfg.init_std);
        Block {
            ln1: LayerNorm::identity(d),
            q: Linear::normal(d, d, s, rng),
            k: Linear::normal(d, d, s, rng),
            v: Linear::normal(d, d, s, rng),
            o: Linear::normal(d, d, s, rng),
            ln2: LayerNorm::identity(d),
            fc1: Linear::normal(d, f, s, rng),
            fc2: Linear::normal(f, d, s, rng),
        }
    }

    fn zeros(cfg: &EncoderConfig) -> Self {
        let (d, f) = (cfg.model_dim, cfg.ffn_dim);
        Block {
            ln1: LayerNorm::zeros(d),
            q: Linear::zeros(d, d),
            k: Linear::zeros(d, d),
            v: Linear::zeros(d, d),
            o: Linear::zeros(d, d),
            ln2: LayerNorm::zeros(d),
            fc1: Linear::zeros(d, f),
            fc2: Linear::zeros(f, d),
        }
    }
}

/// Every trainable tensor of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<F> {
    pub norms: Vec<LayerNorm<F>>,
    pub proj: Vec<Linear<F>>,
    pub mask_emb: Vec<Vec<F>>,
    pub fusion: Linear<F>,
    pub blocks: Vec<Block<F>>,
    pub heads: Vec<Linear<F>>,
}

pub(crate) fn fill_normal<F: Scalar>(xs: &mut [F], std: f64, rng: &mut Rng) {
    if std == 0.0 {
        xs.fill(F::zero());
        return;
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    for x in xs {
        *x = F::from_f64_lossy(normal.sample(rng));
    }
}

impl<F: Scalar> EncoderParams<F> {
    pub fn init(cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let (p, d, k, s) = (cfg.channel_proj_dim, cfg.model_dim, cfg.k_per_channel, cfg.init_std);
        let norms = cfg.channel_dims.0.iter().map(|&dc| LayerNorm::identity(dc)).collect();
        let proj = cfg.channel_dims.0.iter().map(|&dc| Linear::normal(dc, p, s, rng)).collect();
        let mask_emb = (0..NUM_CHANNELS)
            .map(|_| {
                let mut v = vec![F::zero(); p];
                fill_normal(&mut v, s, rng);
                v
            })
            .collect();
        let fusion = Linear::normal(cfg.fusion_in(), d, s, rng);
        let blocks = (0..cfg.n_blocks).map(|_| Block::init(cfg, rng)).collect();
        let head_std = if cfg.zero_init_heads { 0.0 } else { s };
        let heads = (0..NUM_CHANNELS).map(|_| Linear::normal(d, k, head_std, rng)).collect();
        EncoderParams {
            norms,
            proj,
            mask_emb,
            fusion,
            blocks,
            heads,
        }
    }

    /// All-zero tensors shaped like `cfg`'s parameters.
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let (p, d, k) = (cfg.channel_proj_dim, cfg.model_dim, cfg.k_per_channel);
        EncoderParams {
            norms: cfg.channel_dims.0.iter().map(|&dc| LayerNorm::zeros(dc)).collect(),
            proj: cfg.channel_dims.0.iter().map(|&dc| Linear::zeros(dc, p)).collect(),
            mask_emb: vec![vec![F::zero(); p]; NUM_CHANNELS],
            fusion: Linear::zeros(cfg.fusion_in(), d),
            blocks: (0..cfg.n_blocks).map(|_| Block::zeros(cfg)).collect(),
            heads: (0..NUM_CHANNELS).map(|_| Linear::zeros(d, k)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, t| t.fill(F::zero()));
        z
    }

    /// Visits every tensor in registry order.
    pub fn for_each<'a>(&'a self, mut f: impl FnMut(&str, &'a [F])) {
        for (c, ch) in Channel::ALL.iter().enumerate() {
            f(&format!("norm.{ch}.gamma"), &self.norms[c].gamma);
            f(&format!("norm.{ch}.beta"), &self.norms[c].beta);
        }
        for (c, ch) in Channel::ALL.iter().enumerate() {
            f(&format!("proj.{ch}.weight"), &self.proj[c].weight);
            f(&format!("proj.{ch}.bias"), &self.proj[c].bias);
        }
        for (c, ch) in Channel::ALL.iter().enumerate() {
            f(&format!("mask_emb.{ch}"), &self.mask_emb[c]);
        }
        f("fusion.weight", &self.fusion.weight);
        f("fusion.bias", &self.fusion.bias);
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("blocks.{i}.ln1.gamma"), &b.ln1.gamma);
            f(&format!("blocks.{i}.ln1.beta"), &b.ln1.beta);
            for (name, l) in [("q", &b.q), ("k", &b.k), ("v", &b.v), ("o", &b.o)] {
                f(&format!("blocks.{i}.attn.{name}.weight"), &l.weight);
                f(&format!("blocks.{i}.attn.{name}.bias"), &l.bias);
            }
            f(&format!("blocks.{i}.ln2.gamma"), &b.ln2.gamma);
            f(&format!("blocks.{i}.ln2.beta"), &b.ln2.beta);
            f(&format!("blocks.{i}.ffn.fc1.weight"), &b.fc1.weight);
            f(&format!("blocks.{i}.ffn.fc1.bias"), &b.fc1.bias);
            f(&format!("blocks.{i}.ffn.fc2.weight"), &b.fc2.weight);
            f(&format!("blocks.{i}.ffn.fc2.bias"), &b.fc2.bias);
        }
        for (c, ch) in Channel::ALL.iter().enumerate() {
            f(&format!("heads.{ch}.weight"), &self.heads[c].weight);
            f(&format!("heads.{ch}.bias"), &self.heads[c].bias);
        }
    }

    /// Mutable visit in the same order as [`EncoderParams::for_each`].
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Vec<F>)) {
        for (c, ch) in Channel::ALL.iter().enumerate() {
            f(&format!("norm.{ch}.gamma"), &mut self.norms[c].gamma);
            f(&format!("norm.{ch}.beta"), &mut self.norms[c].beta);
        }
        for (c, ch) in Channel::ALL.iter().enumerate() {
            f(&format!("proj.{ch}.weight"), &mut self.proj[c].weight);
            f(&format!("proj.{ch}.bias"), &mut self.proj[c].bias);
        }
        for (c, ch) in Channel::ALL.iter().enumerate() {
            f(&format!("mask_emb.{ch}"), &mut self.mask_emb[c]);
        }
        f("fusion.weight", &mut self.fusion.weight);
        f("fusion.bias", &mut self.fusion.bias);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("blocks.{i}.ln1.gamma"), &mut b.ln1.gamma);
            f(&format!("blocks.{i}.ln1.beta"), &mut b.ln1.beta);
            for (name, l) in [("q", &mut b.q), ("k", &mut b.k), ("v", &mut b.v), ("o", &mut b.o)] {
                f(&format!("blocks.{i}.attn.{name}.weight"), &mut l.weight);
                f(&format!("blocks.{i}.attn.{name}.bias"), &mut l.bias);
            }
            f(&format!("blocks.{i}.ln2.gamma"), &mut b.ln2.gamma);
            f(&format!("blocks.{i}.ln2.beta"), &mut b.ln2.beta);
            f(&format!("blocks.{i}.ffn.fc1.weight"), &mut b.fc1.weight);
            f(&format!("blocks.{i}.ffn.fc1.bias"), &mut b.fc1.bias);
            f(&format!("blocks.{i}.ffn.fc2.weight"), &mut b.fc2.weight);
            f(&format!("blocks.{i}.ffn.fc2.bias"), &mut b.fc2.bias);
        }
        for (c, ch) in Channel::ALL.iter().enumerate() {
            f(&format!("heads.{ch}.weight"), &mut self.heads[c].weight);
            f(&format!("heads.{ch}.bias"), &mut self.heads[c].bias);
        }
    }

    /// `(name, element count)` of every tensor, in registry order.
    pub fn registry(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.for_each(|n, t| out.push((n.to_string(), t.len())));
        out
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.len());
        n
    }

    /// Tensors flattened in registry order.
    pub fn to_flat(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.num_params());
        self.for_each(|_, t| out.extend_from_slice(t));
        out
    }

    pub fn set_flat(&mut self, flat: &[F]) {
        let mut at = 0;
        self.for_each_mut(|_, t| {
            let n = t.len();
            t.copy_from_slice(&flat[at..at + n]);
            at += n;
        });
        assert_eq!(at, flat.len(), "flat vector length mismatch");
    }

    /// `self += alpha · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, alpha: F) {
        let flat = other.to_flat();
        let mut at = 0;
        self.for_each_mut(|_, t| {
            for x in t.iter_mut() {
                *x = *x + alpha * flat[at];
                at += 1;
            }
        });
    }

    pub fn scale(&mut self, alpha: F) {
        self.for_each_mut(|_, t| t.iter_mut().for_each(|x| *x = *x * alpha));
    }

    pub fn sq_norm(&self) -> f64 {
        let mut s = 0.0;
        self.for_each(|_, t| s += t.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>());
        s
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        let mut bad = None;
        self.for_each(|n, t| {
            if bad.is_none() && t.iter().any(|v| !v.is_finite()) {
                bad = Some(n.to_string());
            }
        });
        bad
    }

    pub fn cast<G: Scalar>(&self) -> EncoderParams<G> {
        let lin = |l: &Linear<F>| Linear {
            inp: l.inp,
            out: l.out,
            weight: cast_slice(&l.weight),
            bias: cast_slice(&l.bias),
        };
        let ln = |n: &LayerNorm<F>| LayerNorm {
            gamma: cast_slice(&n.gamma),
            beta: cast_slice(&n.beta),
        };
        EncoderParams {
            norms: self.norms.iter().map(ln).collect(),
            proj: self.proj.iter().map(lin).collect(),
            mask_emb: self.mask_emb.iter().map(|m| cast_slice(m)).collect(),
            fusion: lin(&self.fusion),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1: ln(&b.ln1),
                    q: lin(&b.q),
                    k: lin(&b.k),
                    v: lin(&b.v),
                    o: lin(&b.o),
                    ln2: ln(&b.ln2),
                    fc1: lin(&b.fc1),
                    fc2: lin(&b.fc2),
                })
                .collect(),
            heads: self.heads.iter().map(lin).collect(),
        }
    }

    /// Mutable access to the adapted linear maps, in
    /// [`EncoderConfig::adapted_linears`] order.
    pub fn adapted_linears_mut(&mut self) -> Vec<&mut Linear<F>> {
        let mut out: Vec<&mut Linear<F>> = self.proj.iter_mut().collect();
        out.push(&mut self.fusion);
        for b in &mut self.blocks {
            out.extend([&mut b.q, &mut b.k, &mut b.v, &mut b.o, &mut b.fc1, &mut b.fc2]);
        }
        out
    }

    pub fn adapted_linears(&self) -> Vec<&Linear<F>> {
        let mut out: Vec<&Linear<F>> = self.proj.iter().collect();
        out.push(&self.fusion);
        for b in &self.blocks {
            out.extend([&b.q, &b.k, &b.v, &b.o, &b.fc1, &b.fc2]);
        }
        out
    }
}
