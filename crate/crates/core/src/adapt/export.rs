//! Export of per-frame encoder features for external decoders.
//!
//! Each sequence becomes one single-channel MSF file: the usual header with
//! `C = 1` and `dims = [model_dim]`, every presence byte set, then the
//! `T × model_dim` features.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::featio::{FeatureMatrix, FeatureSequence};

use super::mixture::{weighted_features, LayerWeights};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportFailure {
    pub index: usize,
    pub path: PathBuf,
    pub error: String,
}

/// What an export wrote and what it could not.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub written: Vec<PathBuf>,
    pub failures: Vec<ExportFailure>,
}

/// Mixed per-frame features of one sequence, `T × model_dim`.
pub fn sequence_features(encoder: &Encoder<f32>, lw: &LayerWeights, seq: &FeatureSequence) -> Result<FeatureMatrix> {
    let layers = encoder.forward_layers(seq, None)?;
    let mixed = weighted_features(&layers, lw)?;
    FeatureMatrix::single_channel(encoder.cfg.model_dim, mixed, seq.frame_rate_hint())
}

/// Writes `<out_dir>/<name>.msf` for every `(name, sequence)` pair plus a
/// `manifest.json`. Per-file failures are collected, not fatal.
pub fn export_features(
    encoder: &Encoder<f32>,
    lw: &LayerWeights,
    items: &[(String, FeatureSequence)],
    out_dir: impl AsRef<Path>,
) -> Result<ExportManifest> {
    let out_dir = out_dir.as_ref();
    if lw.len() != encoder.n_layers() {
        return Err(Error::Schema(format!(
            "{} mixture weights for {} layers",
            lw.len(),
            encoder.n_layers()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = ExportManifest::default();
    for (index, (name, seq)) in items.iter().enumerate() {
        let path = out_dir.join(format!("{name}.msf"));
        match sequence_features(encoder, lw, seq).and_then(|m| m.write(&path)) {
            Ok(()) => manifest.written.push(path),
            Err(e) => manifest.failures.push(ExportFailure {
                index,
                path,
                error: e.to_string(),
            }),
        }
    }
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    let mpath = out_dir.join("manifest.json");
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}
