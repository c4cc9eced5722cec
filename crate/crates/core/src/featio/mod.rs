//! Multi-stream frame features.
//!
//! A [`FeatureSequence`] holds, for every frame, one vector per [`Channel`]
//! (face, left hand, right hand, body pose) plus a presence flag recording
//! whether the upstream detector produced that vector. Sequences are stored
//! on disk in the MSF format (see [`msf`]), cleaned with the routines in
//! [`preprocess`], and can be generated synthetically with [`synthetic`].

pub mod msf;
pub mod preprocess;
pub mod synthetic;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use msf::{decode_msf, encode_msf, read_msf, write_msf, FeatureMatrix, MSF_HEADER_LEN};
pub use preprocess::{downsample, interpolate_missing, normalize_pose, Interpolated, PoseLandmarks};
pub use synthetic::{gen_synthetic, SyntheticDataset, SyntheticSpec};

pub const NUM_CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    Face,
    LeftHand,
    RightHand,
    BodyPose,
}

impl Channel {
    /// Storage order, shared by files, masks and model parameters.
    pub const ALL: [Channel; NUM_CHANNELS] = [
        Channel::Face,
        Channel::LeftHand,
        Channel::RightHand,
        Channel::BodyPose,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Channel> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Face => "face",
            Channel::LeftHand => "left_hand",
            Channel::RightHand => "right_hand",
            Channel::BodyPose => "body_pose",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub channel: Channel,
    pub dim: usize,
}

/// Per-channel feature widths, in [`Channel::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelDims(pub [usize; NUM_CHANNELS]);

impl Default for ChannelDims {
    /// 384-d crop embeddings for face and hands, 14-d normalized pose.
    fn default() -> Self {
        ChannelDims([384, 384, 384, 14])
    }
}

impl ChannelDims {
    pub fn dim(&self, channel: Channel) -> usize {
        self.0[channel.index()]
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    /// Offset of `channel` inside a concatenated frame vector.
    pub fn offset(&self, channel: Channel) -> usize {
        self.0[..channel.index()].iter().sum()
    }

    pub fn specs(&self) -> [ChannelSpec; NUM_CHANNELS] {
        Channel::ALL.map(|channel| ChannelSpec {
            channel,
            dim: self.dim(channel),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.contains(&0) {
            return Err(Error::Schema(format!("channel dims must be positive, got {:?}", self.0)));
        }
        Ok(())
    }
}

/// A `T`-frame multi-stream sequence.
///
/// Frames are stored frame-major: frame `t` is the concatenation of the four
/// channel vectors in [`Channel::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    dims: ChannelDims,
    data: Vec<f32>,
    presence: Vec<[bool; NUM_CHANNELS]>,
    frame_rate_hint: f32,
}

impl FeatureSequence {
    pub fn new(
        dims: ChannelDims,
        data: Vec<f32>,
        presence: Vec<[bool; NUM_CHANNELS]>,
        frame_rate_hint: f32,
    ) -> Result<Self> {
        let seq = FeatureSequence {
            dims,
            data,
            presence,
            frame_rate_hint,
        };
        seq.validate()?;
        Ok(seq)
    }

    /// A `len`-frame sequence of zero vectors with every channel present.
    pub fn zeros(dims: ChannelDims, len: usize, frame_rate_hint: f32) -> Self {
        FeatureSequence {
            dims,
            data: vec![0.0; len * dims.total()],
            presence: vec![[true; NUM_CHANNELS]; len],
            frame_rate_hint,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.presence.is_empty() {
            return Err(Error::Schema("a sequence needs at least one frame".into()));
        }
        let want = self.presence.len() * self.dims.total();
        if self.data.len() != want {
            return Err(Error::Schema(format!(
                "payload holds {} floats, {} frames of width {} need {}",
                self.data.len(),
                self.presence.len(),
                self.dims.total(),
                want
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> ChannelDims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.presence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.presence.is_empty()
    }

    pub fn frame_rate_hint(&self) -> f32 {
        self.frame_rate_hint
    }

    pub fn set_frame_rate_hint(&mut self, hint: f32) {
        self.frame_rate_hint = hint;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let w = self.dims.total();
        &self.data[t * w..(t + 1) * w]
    }

    pub fn channel(&self, t: usize, channel: Channel) -> &[f32] {
        let start = t * self.dims.total() + self.dims.offset(channel);
        &self.data[start..start + self.dims.dim(channel)]
    }

    pub fn channel_mut(&mut self, t: usize, channel: Channel) -> &mut [f32] {
        let start = t * self.dims.total() + self.dims.offset(channel);
        let d = self.dims.dim(channel);
        &mut self.data[start..start + d]
    }

    pub fn presence(&self) -> &[[bool; NUM_CHANNELS]] {
        &self.presence
    }

    pub fn is_present(&self, t: usize, channel: Channel) -> bool {
        self.presence[t][channel.index()]
    }

    /// Writes a channel vector and its presence flag. Absent cells are zeroed.
    pub fn set_channel(&mut self, t: usize, channel: Channel, values: &[f32], present: bool) -> Result<()> {
        let d = self.dims.dim(channel);
        if values.len() != d {
            return Err(Error::Schema(format!(
                "{channel} expects {d} values, got {}",
                values.len()
            )));
        }
        let slot = self.channel_mut(t, channel);
        if present {
            slot.copy_from_slice(values);
        } else {
            slot.fill(0.0);
        }
        self.presence[t][channel.index()] = present;
        Ok(())
    }

    pub fn fully_present(&self) -> bool {
        self.presence.iter().all(|p| p.iter().all(|&x| x))
    }

    /// Frames `[start, end)` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> Result<FeatureSequence> {
        if start >= end || end > self.len() {
            return Err(Error::Argument(format!(
                "frame range {start}..{end} is empty or exceeds length {}",
                self.len()
            )));
        }
        let w = self.dims.total();
        Ok(FeatureSequence {
            dims: self.dims,
            data: self.data[start * w..end * w].to_vec(),
            presence: self.presence[start..end].to_vec(),
            frame_rate_hint: self.frame_rate_hint,
        })
    }

    /// Equality on raw bit patterns, so NaN payloads compare equal to themselves.
    pub fn bitwise_eq(&self, other: &FeatureSequence) -> bool {
        self.dims == other.dims
            && self.presence == other.presence
            && self.frame_rate_hint.to_bits() == other.frame_rate_hint.to_bits()
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
