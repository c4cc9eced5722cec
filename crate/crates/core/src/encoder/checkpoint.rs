//! SHB1 checkpoints.
//!
//! ```text
//! "SHB1" | u32 version=1
//! | config: u32 n_blocks, model_dim, ffn_dim, n_heads, channel_proj_dim,
//!           k_per_channel, 4 × u32 channel dims, u8 positional,
//!           u8 zero_init_heads, f64 init_std, f64 ln_eps
//! | u32 tensor count
//! | per tensor: u32 name length, name bytes (UTF-8), u64 element count,
//!               count × f32
//! ```
//!
//! Everything is little-endian. Tensors appear in registry order and the
//! reader rejects files whose name set or shapes differ from the registry of
//! the stored configuration.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::featio::ChannelDims;

use super::config::EncoderConfig;
use super::model::Encoder;
use super::params::EncoderParams;

pub const SHB_MAGIC: &[u8; 4] = b"SHB1";
pub const SHB_VERSION: u32 = 1;

pub(crate) fn encode_config(cfg: &EncoderConfig, out: &mut Vec<u8>) {
    for v in [cfg.n_blocks, cfg.model_dim, cfg.ffn_dim, cfg.n_heads, cfg.channel_proj_dim, cfg.k_per_channel] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for d in cfg.channel_dims.0 {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(u8::from(cfg.positional));
    out.push(u8::from(cfg.zero_init_heads));
    out.extend_from_slice(&cfg.init_std.to_le_bytes());
    out.extend_from_slice(&cfg.ln_eps.to_le_bytes());
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Length {
            expected: self.pos.saturating_add(n) as u64,
            found: self.bytes.len() as u64,
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub(crate) fn decode_config(r: &mut Cursor<'_>) -> Result<EncoderConfig> {
    let mut w = [0usize; 6];
    for v in &mut w {
        *v = r.u32()? as usize;
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let cfg = EncoderConfig {
        n_blocks: w[0],
        model_dim: w[1],
        ffn_dim: w[2],
        n_heads: w[3],
        channel_proj_dim: w[4],
        k_per_channel: w[5],
        channel_dims: ChannelDims(dims),
        positional: r.u8()? != 0,
        zero_init_heads: r.u8()? != 0,
        init_std: r.f64()?,
        ln_eps: r.f64()?,
    };
    cfg.validate().map_err(|e| Error::Schema(e.to_string()))?;
    Ok(cfg)
}

pub(crate) fn encode_tensors(params: &EncoderParams<f32>, out: &mut Vec<u8>) {
    let reg = params.registry();
    out.extend_from_slice(&(reg.len() as u32).to_le_bytes());
    params.for_each(|name, t| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
}

pub(crate) fn decode_tensors(r: &mut Cursor<'_>, cfg: &EncoderConfig) -> Result<EncoderParams<f32>> {
    let mut params = EncoderParams::<f32>::zeros(cfg);
    let registry = params.registry();
    let n = r.u32()? as usize;
    if n != registry.len() {
        return Err(Error::Schema(format!("checkpoint holds {n} tensors, registry has {}", registry.len())));
    }
    let mut tensors = Vec::with_capacity(n);
    for (want_name, want_len) in &registry {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if name != want_name {
            return Err(Error::Schema(format!("expected tensor {want_name}, found {name}")));
        }
        let count = r.u64()? as usize;
        if count != *want_len {
            return Err(Error::Schema(format!("{name} holds {count} values, expected {want_len}")));
        }
        let data: Vec<f32> = r
            .take(count.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push(data);
    }
    let mut it = tensors.into_iter();
    params.for_each_mut(|_, t| *t = it.next().unwrap());
    Ok(params)
}

pub fn write_checkpoint(model: &Encoder<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SHB_MAGIC);
    out.extend_from_slice(&SHB_VERSION.to_le_bytes());
    encode_config(&model.cfg, &mut out);
    encode_tensors(&model.params, &mut out);
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Encoder<f32>> {
    let mut r = Cursor::new(bytes);
    if r.take(4)? != SHB_MAGIC {
        return Err(Error::Format("bad magic, expected \"SHB1\"".into()));
    }
    let version = r.u32()?;
    if version != SHB_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg = decode_config(&mut r)?;
    let params = decode_tensors(&mut r, &cfg)?;
    if !r.is_done() {
        return Err(Error::Schema("trailing bytes after the last tensor".into()));
    }
    Ok(Encoder { cfg, params })
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(model: &Encoder<f32>, path: impl AsRef<Path>) -> Result<()> {
    atomic_write(path.as_ref(), &write_checkpoint(model))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Encoder<f32>> {
    let path = path.as_ref();
    read_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
