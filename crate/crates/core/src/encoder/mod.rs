//! The transformer encoder: per-channel normalization and projection, mask
//! substitution, a fusion layer, pre-norm transformer blocks and per-channel
//! prediction heads, with analytic gradients and a binary checkpoint format.

pub mod checkpoint;
pub mod config;
pub mod loss;
pub mod model;
pub mod ops;
pub mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{lora_param_fraction, param_count, EncoderConfig, LinearShape};
pub use loss::{argmax, masked_ce_grad, masked_ce_loss, masked_stats, MaskedLoss, MaskedStats};
pub use model::{Encoder, ForwardCache, ForwardOutput, OutputGrads};
pub use params::{Block, EncoderParams, LayerNorm, Linear};
