//! The MSF container.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! offset  size        field
//! 0       4           magic "MSF1"
//! 4       4           u32 version (1)
//! 8       4           u32 num_channels (C)
//! 12      4*C         u32 channel dims
//! ..      8           u64 T
//! ..      4           f32 frame_rate_hint
//! ..      T*C         presence bytes (0 or 1), frame-major
//! ..      4*T*sum(d)  f32 payload, frame-major, channels concatenated
//! ```
//!
//! Multi-stream sequences always use `C = 4` in Face, LeftHand, RightHand,
//! BodyPose order (a 40-byte header). Exported encoder features use the
//! single-channel variant `C = 1`, `dims = [model_dim]`, with every presence
//! byte set to 1.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{ChannelDims, FeatureSequence, NUM_CHANNELS};

pub const MSF_MAGIC: &[u8; 4] = b"MSF1";
pub const MSF_VERSION: u32 = 1;
/// Header length of a four-channel file.
pub const MSF_HEADER_LEN: usize = header_len(NUM_CHANNELS);

pub const fn header_len(channels: usize) -> usize {
    4 + 4 + 4 + 4 * channels + 8 + 4
}

/// A decoded MSF file with an arbitrary channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub dims: Vec<usize>,
    pub frame_rate_hint: f32,
    /// `T × C` flags, frame-major.
    pub presence: Vec<bool>,
    /// `T × sum(dims)` floats, frame-major.
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    /// A fully present single-channel matrix of `len` rows of width `dim`.
    pub fn single_channel(dim: usize, data: Vec<f32>, frame_rate_hint: f32) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) || data.is_empty() {
            return Err(Error::Schema(format!(
                "{} floats do not form rows of width {dim}",
                data.len()
            )));
        }
        let len = data.len() / dim;
        Ok(FeatureMatrix {
            dims: vec![dim],
            frame_rate_hint,
            presence: vec![true; len],
            data,
        })
    }

    pub fn len(&self) -> usize {
        if self.dims.is_empty() {
            0
        } else {
            self.presence.len() / self.dims.len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, t: usize) -> &[f32] {
        let w: usize = self.dims.iter().sum();
        &self.data[t * w..(t + 1) * w]
    }

    fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
            return Err(Error::Schema(format!("invalid channel dims {:?}", self.dims)));
        }
        let c = self.dims.len();
        if !self.presence.len().is_multiple_of(c) {
            return Err(Error::Schema("presence flags do not divide into frames".into()));
        }
        let t = self.presence.len() / c;
        let w: usize = self.dims.iter().sum();
        if self.data.len() != t * w {
            return Err(Error::Schema(format!(
                "payload holds {} floats, header implies {}",
                self.data.len(),
                t * w
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let c = self.dims.len();
        let t = self.len();
        let mut out = Vec::with_capacity(header_len(c) + self.presence.len() + 4 * self.data.len());
        out.extend_from_slice(MSF_MAGIC);
        out.extend_from_slice(&MSF_VERSION.to_le_bytes());
        out.extend_from_slice(&(c as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(t as u64).to_le_bytes());
        out.extend_from_slice(&self.frame_rate_hint.to_le_bytes());
        out.extend(self.presence.iter().map(|&p| u8::from(p)));
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MSF_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected \"MSF1\"")));
        }
        let version = r.u32()?;
        if version != MSF_VERSION {
            return Err(Error::Format(format!("unsupported MSF version {version}")));
        }
        let c = r.u32()? as usize;
        if c == 0 {
            return Err(Error::Schema("file declares zero channels".into()));
        }
        let mut dims = Vec::with_capacity(c.min(64));
        for _ in 0..c {
            let d = r.u32()? as usize;
            if d == 0 {
                return Err(Error::Schema("file declares a zero-width channel".into()));
            }
            dims.push(d);
        }
        let t = r.u64()?;
        let frame_rate_hint = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let width: u64 = dims.iter().map(|&d| d as u64).sum();
        let expected = (r.pos as u64)
            .checked_add(t.checked_mul(c as u64).ok_or_else(overflow)?)
            .and_then(|n| n.checked_add(t.checked_mul(width)?.checked_mul(4)?))
            .ok_or_else(overflow)?;
        let found = bytes.len() as u64;
        if found < expected {
            return Err(Error::Length { expected, found });
        }
        if found > expected {
            return Err(Error::Schema(format!(
                "file holds {found} bytes but its header declares {expected}"
            )));
        }
        let t = t as usize;
        let presence = r
            .take(t * c)?
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Format(format!("presence byte {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let data = r
            .take(t * width as usize * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(FeatureMatrix {
            dims,
            frame_rate_hint,
            presence,
            data,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.encode()?;
        let path = path.as_ref();
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

fn overflow() -> Error {
    Error::Format("header sizes overflow".into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Length {
            expected: (self.pos + n) as u64,
            found: self.bytes.len() as u64,
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl From<&FeatureSequence> for FeatureMatrix {
    fn from(seq: &FeatureSequence) -> Self {
        FeatureMatrix {
            dims: seq.dims().0.to_vec(),
            frame_rate_hint: seq.frame_rate_hint(),
            presence: seq.presence().iter().flatten().copied().collect(),
            data: seq.data().to_vec(),
        }
    }
}

impl TryFrom<FeatureMatrix> for FeatureSequence {
    type Error = Error;

    fn try_from(m: FeatureMatrix) -> Result<Self> {
        if m.dims.len() != NUM_CHANNELS {
            return Err(Error::Schema(format!(
                "multi-stream files carry {NUM_CHANNELS} channels, found {}",
                m.dims.len()
            )));
        }
        let dims = ChannelDims([m.dims[0], m.dims[1], m.dims[2], m.dims[3]]);
        let presence = m
            .presence
            .chunks_exact(NUM_CHANNELS)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect();
        FeatureSequence::new(dims, m.data, presence, m.frame_rate_hint)
    }
}

pub fn encode_msf(seq: &FeatureSequence) -> Result<Vec<u8>> {
    seq.validate()?;
    FeatureMatrix::from(seq).encode()
}

pub fn decode_msf(bytes: &[u8]) -> Result<FeatureSequence> {
    FeatureSequence::try_from(FeatureMatrix::decode(bytes)?)
}

pub fn read_msf(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    FeatureSequence::try_from(FeatureMatrix::read(path)?)
}

/// Writes `seq` to `path`. The sequence is validated before any byte is written.
pub fn write_msf(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_msf(seq)?;
    let path = path.as_ref();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_frame_file_has_layout_length() {
        let seq = FeatureSequence::zeros(ChannelDims::default(), 1, 14.89);
        let bytes = encode_msf(&seq).unwrap();
        assert_eq!(MSF_HEADER_LEN, 40);
        assert_eq!(bytes.len(), 40 + 4 + 1166 * 4);
        assert_eq!(bytes, encode_msf(&seq).unwrap());
        let back = decode_msf(&bytes).unwrap();
        assert!(back.bitwise_eq(&seq));
        assert!(back.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn corrupt_inputs_map_to_distinct_errors() {
        let seq = FeatureSequence::zeros(ChannelDims([2, 2, 2, 2]), 3, 30.0);
        let bytes = encode_msf(&seq).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_msf(&bad_magic), Err(Error::Format(_))));

        let mut bad_version = bytes.clone();
        bad_version[4] = 2;
        assert!(matches!(decode_msf(&bad_version), Err(Error::Format(_))));

        assert!(matches!(decode_msf(&bytes[..bytes.len() - 1]), Err(Error::Length { .. })));
        assert!(matches!(decode_msf(&bytes[..10]), Err(Error::Length { .. })));

        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 4]);
        assert!(matches!(decode_msf(&extra), Err(Error::Schema(_))));

        let mut bad_presence = bytes.clone();
        bad_presence[header_len(4)] = 7;
        assert!(matches!(decode_msf(&bad_presence), Err(Error::Format(_))));

        let single = FeatureMatrix::single_channel(2, vec![1.0, 2.0], 1.0).unwrap();
        assert!(matches!(decode_msf(&single.encode().unwrap()), Err(Error::Schema(_))));
    }

    #[test]
    fn schema_violation_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.msf");
        let mut m = FeatureMatrix::single_channel(3, vec![0.0; 6], 1.0).unwrap();
        m.data.pop();
        assert!(matches!(m.write(&path), Err(Error::Schema(_))));
        assert!(!path.exists());
    }

    #[test]
    fn single_channel_variant_round_trips() {
        let m = FeatureMatrix::single_channel(3, (0..21).map(|i| i as f32).collect(), 7.5).unwrap();
        assert_eq!(m.len(), 7);
        let bytes = m.encode().unwrap();
        assert_eq!(bytes.len(), header_len(1) + 7 + 21 * 4);
        assert_eq!(FeatureMatrix::decode(&bytes).unwrap(), m);
        assert_eq!(m.row(2), &[6.0, 7.0, 8.0]);
    }
}
