//! Multi-stream masked cluster prediction.
//!
//! Four per-frame feature streams (face, both hands, body pose) are clustered
//! offline into discrete pseudo-labels, partially masked, encoded by a
//! transformer and trained to recover the masked cluster ids. The pretrained
//! encoder is then adapted to classification through frozen probes, full
//! fine-tuning, rank-1 low-rank adapters and multi-task head banks.
//!
//! | module | contents |
//! |---|---|
//! | [`featio`] | feature data model, MSF files, interpolation, pose normalization, synthetic data |
//! | [`cluster`] | per-channel k-means and pseudo-label assignment |
//! | [`masking`] | channel, time and random span masking |
//! | [`encoder`] | the transformer encoder with analytic gradients and checkpoints |
//! | [`pretrain`] | schedules, batching, Adam and the masked-prediction loop |
//! | [`adapt`] | layer mixtures, classifier heads, LoRA, task banks, recall@k, feature export |

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Numeric kernels index several parallel buffers with one loop variable.
#![allow(clippy::needless_range_loop)]

pub mod adapt;
pub mod cluster;
pub mod encoder;
pub mod error;
pub mod featio;
pub mod masking;
pub mod pretrain;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/features.md")]
    pub mod features {}
    #[doc = include_str!("../../../book/src/clustering.md")]
    pub mod clustering {}
    #[doc = include_str!("../../../book/src/masking.md")]
    pub mod masking {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    pub mod encoder {}
    #[doc = include_str!("../../../book/src/pretraining.md")]
    pub mod pretraining {}
    #[doc = include_str!("../../../book/src/adaptation.md")]
    pub mod adaptation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
