//! Forward and backward passes of the encoder.
//!
//! ```text
//! x_c ─► LayerNorm_c ─► Linear_c (d_c→P) ─► [mask substitution] ─┐
//!                                                   concat (4P) ◄┘
//!   ─► fusion (4P→D) + sinusoidal positions   = layers[0]
//!   ─► block_1 … block_L                       = layers[1..=L]
//!   ─► head_c (D→K) on layers[L]               = logits[c]
//! ```
//!
//! Blocks are pre-norm: `a = h + Attn(LN1(h))`, `out = a + FFN(LN2(a))`
//! with a GELU feed-forward.

use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::featio::{Channel, FeatureSequence, NUM_CHANNELS};
use crate::masking::MaskPlan;
use crate::rng::{derive_seed, Rng};
use crate::scalar::Scalar;

use super::config::EncoderConfig;
use super::ops::{
    attention, attention_backward, gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward,
    sinusoidal_positions, NormCache,
};
use super::params::{Block, EncoderParams};

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<F = f32> {
    pub cfg: EncoderConfig,
    pub params: EncoderParams<F>,
}

/// Outputs of one forward pass over a `len`-frame sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<F> {
    pub len: usize,
    /// `n_blocks + 1` tensors of `len × model_dim`; entry 0 is the fusion output.
    pub layers: Vec<Vec<F>>,
    /// Four `len × k` score tensors, empty when heads were skipped.
    pub logits: Vec<Vec<F>>,
}

/// Upstream gradients fed into [`Encoder::backward`].
#[derive(Debug, Clone)]
pub struct OutputGrads<F> {
    pub logits: Option<Vec<Vec<F>>>,
    /// Extra gradient per layer output (e.g. from a layer mixture).
    pub layers: Vec<Option<Vec<F>>>,
}

impl<F> OutputGrads<F> {
    pub fn from_logits(logits: Vec<Vec<F>>, n_layers: usize) -> Self {
        OutputGrads {
            logits: Some(logits),
            layers: (0..n_layers).map(|_| None).collect(),
        }
    }
}

#[derive(Debug, Clone)]
struct BlockCache<F> {
    ln1: NormCache<F>,
    u: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    probs: Vec<F>,
    ctx: Vec<F>,
    ln2: NormCache<F>,
    w: Vec<F>,
    f: Vec<F>,
    g: Vec<F>,
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    len: usize,
    norm: Vec<NormCache<F>>,
    normed: Vec<Vec<F>>,
    z: Vec<F>,
    blocks: Vec<BlockCache<F>>,
    masked: Vec<bool>,
}

impl<F: Scalar> Encoder<F> {
    /// Freshly initialized encoder; parameters are a pure function of `seed`.
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::seed_from_u64(derive_seed(seed, "encoder.init", 0));
        let params = EncoderParams::init(&cfg, &mut rng);
        Ok(Encoder { cfg, params })
    }

    pub fn from_params(cfg: EncoderConfig, params: EncoderParams<F>) -> Result<Self> {
        cfg.validate()?;
        let want = EncoderParams::<F>::zeros(&cfg).registry();
        if params.registry() != want {
            return Err(Error::Schema("parameter shapes do not match the configuration".into()));
        }
        Ok(Encoder { cfg, params })
    }

    pub fn n_layers(&self) -> usize {
        self.cfg.n_blocks + 1
    }

    /// Re-draws the last transformer block from `seed`.
    pub fn reinit_last_block(&mut self, seed: u64) {
        if let Some(last) = self.params.blocks.last_mut() {
            let mut rng = Rng::seed_from_u64(derive_seed(seed, "encoder.reinit_last", 0));
            *last = Block::init(&self.cfg, &mut rng);
        }
    }

    pub fn cast<G: Scalar>(&self) -> Encoder<G> {
        Encoder {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
        }
    }

    fn check_input(&self, seq: &FeatureSequence, plan: Option<&MaskPlan>) -> Result<()> {
        if seq.dims() != self.cfg.channel_dims {
            return Err(Error::Schema(format!(
                "sequence channel dims {:?} differ from encoder dims {:?}",
                seq.dims().0,
                self.cfg.channel_dims.0
            )));
        }
        if !seq.fully_present() {
            return Err(Error::Precondition("sequence has missing detections; interpolate first".into()));
        }
        if let Some(p) = plan {
            if p.len() != seq.len() {
                return Err(Error::Schema(format!("mask plan covers {} frames, sequence has {}", p.len(), seq.len())));
            }
        }
        Ok(())
    }

    pub fn forward(&self, seq: &FeatureSequence, plan: Option<&MaskPlan>) -> Result<ForwardOutput<F>> {
        Ok(self.forward_cached(seq, plan, true)?.0)
    }

    /// Forward pass without the prediction heads.
    pub fn forward_layers(&self, seq: &FeatureSequence, plan: Option<&MaskPlan>) -> Result<Vec<Vec<F>>> {
        Ok(self.forward_cached(seq, plan, false)?.0.layers)
    }

    pub fn forward_cached(
        &self,
        seq: &FeatureSequence,
        plan: Option<&MaskPlan>,
        with_heads: bool,
    ) -> Result<(ForwardOutput<F>, ForwardCache<F>)> {
        self.check_input(seq, plan)?;
        let cfg = &self.cfg;
        let p = &self.params;
        let (len, pd, d) = (seq.len(), cfg.channel_proj_dim, cfg.model_dim);
        let eps = F::from_f64_lossy(cfg.ln_eps);
        let masked: Vec<bool> = match plan {
            Some(plan) => (0..len).flat_map(|t| (0..NUM_CHANNELS).map(move |c| plan.is_masked(c, t))).collect(),
            None => vec![false; len * NUM_CHANNELS],
        };

        // Channel streams → fused frame representation.
        let mut z = vec![F::zero(); len * NUM_CHANNELS * pd];
        let mut norm = Vec::with_capacity(NUM_CHANNELS);
        let mut normed = Vec::with_capacity(NUM_CHANNELS);
        for ch in Channel::ALL {
            let c = ch.index();
            let dc = cfg.channel_dims.dim(ch);
            let mut x = Vec::with_capacity(len * dc);
            for t in 0..len {
                x.extend(seq.channel(t, ch).iter().map(|&v| F::from_f64_lossy(f64::from(v))));
            }
            let (n, nc) = layer_norm(&x, dc, &p.norms[c], eps);
            let proj = linear(&n, &p.proj[c]);
            for t in 0..len {
                let dst = &mut z[(t * NUM_CHANNELS + c) * pd..(t * NUM_CHANNELS + c + 1) * pd];
                if masked[t * NUM_CHANNELS + c] {
                    dst.copy_from_slice(&p.mask_emb[c]);
                } else {
                    dst.copy_from_slice(&proj[t * pd..(t + 1) * pd]);
                }
            }
            norm.push(nc);
            normed.push(n);
        }
        let mut h = linear(&z, &p.fusion);
        if cfg.positional {
            for (x, pe) in h.iter_mut().zip(sinusoidal_positions::<F>(len, d)) {
                *x = *x + pe;
            }
        }

        let mut layers = Vec::with_capacity(cfg.n_blocks + 1);
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for b in &p.blocks {
            let (u, ln1) = layer_norm(&h, d, &b.ln1, eps);
            let (q, k, v) = (linear(&u, &b.q), linear(&u, &b.k), linear(&u, &b.v));
            let (ctx, probs) = attention(&q, &k, &v, len, d, cfg.n_heads);
            let mut a = linear(&ctx, &b.o);
            for (x, &r) in a.iter_mut().zip(&h) {
                *x = *x + r;
            }
            let (w, ln2) = layer_norm(&a, d, &b.ln2, eps);
            let f = linear(&w, &b.fc1);
            let g: Vec<F> = f.iter().map(|&x| gelu(x)).collect();
            let mut out = linear(&g, &b.fc2);
            for (x, &r) in out.iter_mut().zip(&a) {
                *x = *x + r;
            }
            layers.push(std::mem::replace(&mut h, out));
            blocks.push(BlockCache {
                ln1,
                u,
                q,
                k,
                v,
                probs,
                ctx,
                ln2,
                w,
                f,
                g,
            });
        }
        let logits = if with_heads {
            p.heads.iter().map(|head| linear(&h, head)).collect()
        } else {
            Vec::new()
        };
        layers.push(h);
        Ok((
            ForwardOutput { len, layers, logits },
            ForwardCache {
                len,
                norm,
                normed,
                z,
                blocks,
                masked,
            },
        ))
    }

    /// Gradients of a scalar objective with respect to every parameter, given
    /// its gradients at the logits and/or the layer outputs.
    pub fn backward(&self, out: &ForwardOutput<F>, cache: &ForwardCache<F>, grads: &OutputGrads<F>) -> EncoderParams<F> {
        let cfg = &self.cfg;
        let p = &self.params;
        let (len, pd, d) = (cache.len, cfg.channel_proj_dim, cfg.model_dim);
        let mut g = p.zeros_like();
        let n_layers = cfg.n_blocks + 1;
        let top = &out.layers[n_layers - 1];

        let mut dh = vec![F::zero(); len * d];
        if let Some(dlogits) = &grads.logits {
            for (c, dl) in dlogits.iter().enumerate() {
                if dl.iter().all(|v| v.is_zero()) {
                    continue;
                }
                let dx = linear_backward(dl, top, &p.heads[c], &mut g.heads[c], true).unwrap();
                add_into(&mut dh, &dx);
            }
        }
        if let Some(Some(extra)) = grads.layers.get(n_layers - 1) {
            add_into(&mut dh, extra);
        }

        for (i, (b, bc)) in p.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let gb = &mut g.blocks[i];
            // out = a + fc2(gelu(fc1(LN2(a))))
            let dg = linear_backward(&dh, &bc.g, &b.fc2, &mut gb.fc2, true).unwrap();
            let df: Vec<F> = dg.iter().zip(&bc.f).map(|(&d, &x)| d * gelu_grad(x)).collect();
            let dw = linear_backward(&df, &bc.w, &b.fc1, &mut gb.fc1, true).unwrap();
            let mut da = layer_norm_backward(&dw, d, &b.ln2, &bc.ln2, &mut gb.ln2);
            add_into(&mut da, &dh);
            // a = h + o(attn(q, k, v))
            let dctx = linear_backward(&da, &bc.ctx, &b.o, &mut gb.o, true).unwrap();
            let (dq, dk, dv) = attention_backward(&dctx, &bc.q, &bc.k, &bc.v, &bc.probs, len, d, cfg.n_heads);
            let mut du = linear_backward(&dq, &bc.u, &b.q, &mut gb.q, true).unwrap();
            add_into(&mut du, &linear_backward(&dk, &bc.u, &b.k, &mut gb.k, true).unwrap());
            add_into(&mut du, &linear_backward(&dv, &bc.u, &b.v, &mut gb.v, true).unwrap());
            let mut dprev = layer_norm_backward(&du, d, &b.ln1, &bc.ln1, &mut gb.ln1);
            add_into(&mut dprev, &da);
            if let Some(Some(extra)) = grads.layers.get(i) {
                add_into(&mut dprev, extra);
            }
            dh = dprev;
        }

        let dz = linear_backward(&dh, &cache.z, &p.fusion, &mut g.fusion, true).unwrap();
        for ch in Channel::ALL {
            let c = ch.index();
            let dc = cfg.channel_dims.dim(ch);
            let mut dproj = vec![F::zero(); len * pd];
            let mut any_visible = false;
            for t in 0..len {
                let src = &dz[(t * NUM_CHANNELS + c) * pd..(t * NUM_CHANNELS + c + 1) * pd];
                if cache.masked[t * NUM_CHANNELS + c] {
                    add_into(&mut g.mask_emb[c], src);
                } else {
                    dproj[t * pd..(t + 1) * pd].copy_from_slice(src);
                    any_visible = true;
                }
            }
            if !any_visible {
                continue;
            }
            let dn = linear_backward(&dproj, &cache.normed[c], &p.proj[c], &mut g.proj[c], true).unwrap();
            let _ = layer_norm_backward(&dn, dc, &p.norms[c], &cache.norm[c], &mut g.norms[c]);
        }
        g
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a = *a + b;
    }
}
