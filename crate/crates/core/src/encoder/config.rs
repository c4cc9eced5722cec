use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featio::{ChannelDims, NUM_CHANNELS};

/// Shape and initialization of the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub n_blocks: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub n_heads: usize,
    /// Width of each channel's projection; the fusion layer sees `4 ×` this.
    pub channel_proj_dim: usize,
    /// Cluster count of every channel's pseudo-labels.
    pub k_per_channel: usize,
    pub channel_dims: ChannelDims,
    /// Adds sinusoidal absolute positions after the fusion layer.
    pub positional: bool,
    pub init_std: f64,
    /// Start the prediction heads at zero (uniform logits).
    pub zero_init_heads: bool,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    /// The base configuration: 12 blocks of width 768, 3072-wide FFN, 12 heads.
    fn default() -> Self {
        EncoderConfig {
            n_blocks: 12,
            model_dim: 768,
            ffn_dim: 3072,
            n_heads: 12,
            channel_proj_dim: 256,
            k_per_channel: 256,
            channel_dims: ChannelDims::default(),
            positional: true,
            init_std: 0.02,
            zero_init_heads: false,
            ln_eps: 1e-5,
        }
    }
}

/// `(in, out)` of one linear map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearShape {
    pub inp: usize,
    pub out: usize,
}

impl LinearShape {
    fn params(self) -> usize {
        self.inp * self.out + self.out
    }
}

impl EncoderConfig {
    /// A small configuration for tests and desk-scale experiments.
    pub fn tiny(channel_dims: ChannelDims, model_dim: usize, n_blocks: usize, n_heads: usize, k: usize) -> Self {
        EncoderConfig {
            n_blocks,
            model_dim,
            ffn_dim: 4 * model_dim,
            n_heads,
            channel_proj_dim: (model_dim / 4).max(1),
            k_per_channel: k,
            channel_dims,
            ..EncoderConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.model_dim == 0 || self.ffn_dim == 0 || self.n_heads == 0 || self.channel_proj_dim == 0 {
            return bad("encoder widths and head count must be positive".into());
        }
        if !self.model_dim.is_multiple_of(self.n_heads) {
            return bad(format!("model_dim {} is not divisible by n_heads {}", self.model_dim, self.n_heads));
        }
        if self.k_per_channel < 2 {
            return bad(format!("k_per_channel must be at least 2, got {}", self.k_per_channel));
        }
        if !(self.init_std >= 0.0) || !(self.ln_eps > 0.0) {
            return bad("init_std must be non-negative and ln_eps positive".into());
        }
        self.channel_dims.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn fusion_in(&self) -> usize {
        NUM_CHANNELS * self.channel_proj_dim
    }

    /// The linear maps that receive low-rank adapters, in registry order:
    /// channel projections, fusion, then per block q, k, v, o, fc1, fc2.
    /// Prediction heads are not adapted; they are dropped downstream.
    pub fn adapted_linears(&self) -> Vec<LinearShape> {
        let (p, d, f) = (self.channel_proj_dim, self.model_dim, self.ffn_dim);
        let mut out: Vec<LinearShape> = self.channel_dims.0.iter().map(|&inp| LinearShape { inp, out: p }).collect();
        out.push(LinearShape { inp: self.fusion_in(), out: d });
        for _ in 0..self.n_blocks {
            out.extend([LinearShape { inp: d, out: d }; 4]);
            out.push(LinearShape { inp: d, out: f });
            out.push(LinearShape { inp: f, out: d });
        }
        out
    }

    /// Trainable parameters, term by term:
    ///
    /// * channel layer norms: `2·Σ d_c`
    /// * channel projections: `Σ (d_c·P + P)`
    /// * mask embeddings: `4·P`
    /// * fusion: `4P·D + D`
    /// * each block: `2D` (norm) `+ 4(D² + D)` (q, k, v, o) `+ 2D` (norm)
    ///   `+ (D·F + F) + (F·D + D)` (feed-forward)
    /// * prediction heads: `4(D·K + K)`
    pub fn param_count(&self) -> usize {
        let (p, d, f, k) = (self.channel_proj_dim, self.model_dim, self.ffn_dim, self.k_per_channel);
        let dims = &self.channel_dims.0;
        let norms = 2 * dims.iter().sum::<usize>();
        let proj: usize = dims.iter().map(|&dc| LinearShape { inp: dc, out: p }.params()).sum();
        let mask = NUM_CHANNELS * p;
        let fusion = LinearShape { inp: NUM_CHANNELS * p, out: d }.params();
        let block = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        let heads = NUM_CHANNELS * LinearShape { inp: d, out: k }.params();
        norms + proj + mask + fusion + self.n_blocks * block + heads
    }

    /// Parameters added by rank-1 adapters: `Σ (in + out)` over adapted linears.
    pub fn lora_param_count(&self) -> usize {
        self.adapted_linears().iter().map(|s| s.inp + s.out).sum()
    }

    pub fn lora_param_fraction(&self) -> f64 {
        self.lora_param_count() as f64 / self.param_count() as f64
    }
}

/// Convenience wrapper over [`EncoderConfig::param_count`].
pub fn param_count(cfg: &EncoderConfig) -> usize {
    cfg.param_count()
}

/// Convenience wrapper over [`EncoderConfig::lora_param_fraction`].
pub fn lora_param_fraction(cfg: &EncoderConfig) -> f64 {
    cfg.lora_param_fraction()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_config_is_about_86m() {
        let n = EncoderConfig::default().param_count();
        assert_eq!(n, 86_931_996);
        assert!((n as f64 - 86e6).abs() / 86e6 < 0.02);
    }

    #[test]
    fn zero_block_count_is_the_hand_sum() {
        let cfg = EncoderConfig { n_blocks: 0, ..EncoderConfig::default() };
        let norms = 2 * 1166;
        let proj = 1166 * 256 + 4 * 256;
        let mask = 4 * 256;
        let fusion = 1024 * 768 + 768;
        let heads = 4 * (768 * 256 + 256);
        assert_eq!(cfg.param_count(), norms + proj + mask + fusion + heads);
    }

    #[test]
    fn doubling_ffn_adds_the_closed_form_difference() {
        let base = EncoderConfig::default();
        let wide = EncoderConfig { ffn_dim: 2 * base.ffn_dim, ..base.clone() };
        let (d, f) = (base.model_dim, base.ffn_dim);
        assert_eq!(wide.param_count() - base.param_count(), base.n_blocks * (2 * d * f + f));
    }

    #[test]
    fn lora_fraction_of_base_config() {
        let cfg = EncoderConfig::default();
        // 4 projections + fusion + 12 × (q, k, v, o, fc1, fc2).
        let by_hand = (3 * (384 + 256) + (14 + 256)) + (1024 + 768) + 12 * (4 * 1536 + 2 * (768 + 3072));
        assert_eq!(cfg.lora_param_count(), by_hand);
        let frac = cfg.lora_param_fraction();
        assert!((0.0018..=0.0022).contains(&frac), "{frac}");
    }

    #[test]
    fn validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        assert!(EncoderConfig { n_heads: 5, ..EncoderConfig::default() }.validate().is_err());
        assert!(EncoderConfig { k_per_channel: 1, ..EncoderConfig::default() }.validate().is_err());
    }
}
