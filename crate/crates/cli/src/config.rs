//! Experiment configuration: JSON file, `--set` overrides, defaults, checks.
//!
//! Resolution layers the file over the defaults, applies overrides, rejects
//! unknown keys, fills derived fields and validates. Every sub-seed is a
//! function of the top-level `seed`, and `train.mask` mirrors the top-level
//! `mask`; setting a derived field to anything else is a config error.
//! Resolving an already resolved config returns it unchanged.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use multistream::adapt::{AdaptMode, DownstreamConfig, TaskSpec};
use multistream::cluster::KMeansConfig;
use multistream::encoder::EncoderConfig;
use multistream::featio::SyntheticSpec;
use multistream::masking::MaskConfig;
use multistream::pretrain::TrainConfig;
use multistream::rng::derive_seed;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// The one seed every stage derives its randomness from.
    pub seed: u64,
    pub paths: Paths,
    pub synthetic: SyntheticSpec,
    pub cluster: ClusterSection,
    pub mask: MaskConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub adapter: AdapterSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Read-only input for every command except `gen-synthetic`.
    pub dataset_dir: PathBuf,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterSection {
    pub kmeans: KMeansConfig,
    /// Fraction of frames sampled to fit each channel's centroids.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterSection {
    pub mode: AdaptMode,
    pub downstream: DownstreamConfig,
    /// Task label spaces; empty means one task per name in the label file,
    /// sized by its largest class id.
    pub tasks: Vec<TaskSpec>,
    /// Train and validation fractions of the labeled sequences; the rest is test.
    pub split: [f64; 2],
    /// Layer to export with `extract`; `null` exports the uniform mixture.
    pub export_layer: Option<usize>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset_dir: "data".into(),
            output_dir: "out".into(),
        }
    }
}

impl Default for ClusterSection {
    fn default() -> Self {
        ClusterSection {
            kmeans: KMeansConfig::default(),
            fraction: 0.1,
        }
    }
}

impl Default for AdapterSection {
    fn default() -> Self {
        AdapterSection {
            mode: AdaptMode::FrozenWeighted,
            downstream: DownstreamConfig::default(),
            tasks: Vec::new(),
            split: [0.6, 0.2],
            export_layer: None,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            paths: Paths::default(),
            synthetic: SyntheticSpec::default(),
            cluster: ClusterSection::default(),
            mask: MaskConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            adapter: AdapterSection::default(),
        };
        cfg.fill_derived();
        cfg
    }
}

/// One problem with one field, addressed by its dotted path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn field_error(field: impl Into<String>, message: impl fmt::Display) -> FieldError {
    FieldError {
        field: field.into(),
        message: message.to_string(),
    }
}

/// Values the resolver derives rather than reads.
fn derived(cfg: &ExperimentConfig) -> Vec<(&'static str, Value)> {
    let s = cfg.seed;
    vec![
        ("synthetic.seed", derive_seed(s, "synthetic", 0).into()),
        ("cluster.kmeans.seed", derive_seed(s, "cluster", 0).into()),
        ("train.seed", derive_seed(s, "pretrain", 0).into()),
        ("adapter.downstream.seed", derive_seed(s, "adapt", 0).into()),
        ("train.mask", serde_json::to_value(cfg.mask).expect("mask serializes")),
    ]
}

impl ExperimentConfig {
    fn fill_derived(&mut self) {
        let s = self.seed;
        self.synthetic.seed = derive_seed(s, "synthetic", 0);
        self.cluster.kmeans.seed = derive_seed(s, "cluster", 0);
        self.train.seed = derive_seed(s, "pretrain", 0);
        self.adapter.downstream.seed = derive_seed(s, "adapt", 0);
        self.train.mask = self.mask;
    }

    /// Semantic checks that go beyond types.
    pub fn validate(&self) -> Vec<FieldError> {
        let mut errs = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            errs.push(field_error(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        if let Err(e) = self.synthetic.validate() {
            errs.push(field_error("synthetic", e));
        }
        if self.cluster.kmeans.k == 0 {
            errs.push(field_error("cluster.kmeans.k", "must be at least 1"));
        }
        if self.cluster.kmeans.n_init == 0 {
            errs.push(field_error("cluster.kmeans.n_init", "must be at least 1"));
        }
        if !(self.cluster.fraction > 0.0 && self.cluster.fraction <= 1.0) {
            errs.push(field_error("cluster.fraction", format!("{} outside (0, 1]", self.cluster.fraction)));
        }
        if self.cluster.kmeans.k != self.encoder.k_per_channel {
            errs.push(field_error(
                "encoder.k_per_channel",
                format!("{} differs from cluster.kmeans.k = {}", self.encoder.k_per_channel, self.cluster.kmeans.k),
            ));
        }
        if !(0.0..=1.0).contains(&self.mask.ratio) {
            errs.push(field_error("mask.ratio", format!("{} outside [0, 1]", self.mask.ratio)));
        }
        if self.mask.span == 0 {
            errs.push(field_error("mask.span", "must be at least 1"));
        }
        if let Err(e) = self.encoder.validate() {
            errs.push(field_error("encoder", e));
        }
        // The mirrored mask was checked above under its own field names.
        let train = TrainConfig {
            mask: MaskConfig::default(),
            ..self.train.clone()
        };
        if let Err(e) = train.validate() {
            errs.push(field_error("train", e));
        }
        if let Err(e) = self.adapter.downstream.validate() {
            errs.push(field_error("adapter.downstream", e));
        }
        let [tr, va] = self.adapter.split;
        if !(tr > 0.0 && va > 0.0 && tr + va < 1.0) {
            errs.push(field_error("adapter.split", format!("[{tr}, {va}] must be positive and leave room for a test split")));
        }
        for (i, t) in self.adapter.tasks.iter().enumerate() {
            if t.n_classes < 2 {
                errs.push(field_error(format!("adapter.tasks[{i}].n_classes"), "must be at least 2"));
            }
        }
        if let Some(l) = self.adapter.export_layer {
            if l > self.encoder.n_blocks {
                errs.push(field_error(
                    "adapter.export_layer",
                    format!("{l} exceeds the {} encoder layers", self.encoder.n_blocks + 1),
                ));
            }
        }
        errs
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json()).expect("config serializes");
        std::fs::write(path, text + "\n")
    }
}

/// Parses a `--set` value: JSON when it parses, a bare string otherwise.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), FieldError> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(field_error(path, "malformed override key"));
    }
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = cur else {
            return Err(field_error(parts[..i].join("."), "is not an object and cannot take sub-keys"));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cur = map.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("loop returns on the last part")
}

fn get_path<'a>(root: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(root, |v, p| v.get(p))
}

/// Keys of `user` that have no counterpart in `defaults`.
fn unknown_keys(user: &Value, defaults: &Value, prefix: &str, out: &mut Vec<FieldError>) {
    let (Value::Object(u), Value::Object(d)) = (user, defaults) else {
        return;
    };
    for (k, v) in u {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match d.get(k) {
            None => out.push(field_error(path, "unknown field")),
            Some(dv) => unknown_keys(v, dv, &path, out),
        }
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Builds the resolved config from an optional file body and overrides.
pub fn resolve(file: Option<Value>, overrides: &[String]) -> Result<ExperimentConfig, Vec<FieldError>> {
    let mut user = file.unwrap_or_else(|| Value::Object(Map::new()));
    if !user.is_object() {
        return Err(vec![field_error("<root>", "config must be a JSON object")]);
    }
    let mut errs = Vec::new();
    for o in overrides {
        match o.split_once('=') {
            Some((k, v)) => {
                if let Err(e) = set_path(&mut user, k.trim(), parse_value(v)) {
                    errs.push(e);
                }
            }
            None => errs.push(field_error(o.clone(), "override must look like key.path=value")),
        }
    }
    let defaults = ExperimentConfig::default().to_json();
    unknown_keys(&user, &defaults, "", &mut errs);
    if !errs.is_empty() {
        return Err(errs);
    }

    let mut merged = defaults;
    merge(&mut merged, &user);
    let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
        let path = e.path().to_string();
        vec![field_error(if path == "." { "<root>".to_string() } else { path }, e.into_inner())]
    })?;

    // A derived field may be spelled out only with the value it derives to.
    for (path, want) in derived(&cfg) {
        if let Some(got) = get_path(&user, path) {
            let mut probe = want.clone();
            merge(&mut probe, got);
            if probe != want {
                errs.push(field_error(path, "is derived from the top-level seed and mask; set those instead"));
            }
        }
    }
    cfg.fill_derived();
    errs.extend(cfg.validate());
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(errs)
    }
}

/// Reads `path` (if any) and resolves it with `overrides`.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, Vec<FieldError>> {
    let file = match path {
        None => None,
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| vec![field_error("<file>", format!("{}: {e}", p.display()))])?;
            Some(serde_json::from_str(&text).map_err(|e| vec![field_error("<file>", format!("{}: {e}", p.display()))])?)
        }
    };
    resolve(file, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn small() -> Vec<String> {
        ["seed=4", "encoder.n_blocks=2", "cluster.kmeans.k=8", "encoder.k_per_channel=8", "mask.strategy=\"time\""]
            .map(String::from)
            .to_vec()
    }

    #[test]
    fn resolution_is_a_fixed_point() {
        let cfg = resolve(Some(json!({"train": {"total_steps": 12}})), &small()).unwrap();
        assert_eq!(cfg.train.total_steps, 12);
        assert_eq!(cfg.train.mask, cfg.mask);
        assert_eq!(cfg.train.seed, derive_seed(4, "pretrain", 0));
        let again = resolve(Some(cfg.to_json()), &[]).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_json(), cfg.to_json());
    }

    #[test]
    fn overrides_beat_the_file() {
        let cfg = resolve(Some(json!({"train": {"peak_lr": 0.1}})), &["train.peak_lr=0.2".into()]).unwrap();
        assert_eq!(cfg.train.peak_lr, 0.2);
        let cfg = resolve(None, &["paths.output_dir=elsewhere".into()]).unwrap();
        assert_eq!(cfg.paths.output_dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn errors_name_their_fields() {
        let fields = |r: Result<ExperimentConfig, Vec<FieldError>>| -> Vec<String> {
            r.unwrap_err().into_iter().map(|e| e.field).collect()
        };
        assert_eq!(fields(resolve(None, &["train.bogus=1".into()])), ["train.bogus"]);
        assert_eq!(fields(resolve(None, &["train.total_steps=\"many\"".into()])), ["train.total_steps"]);
        assert_eq!(fields(resolve(None, &["mask.ratio=1.5".into()])), ["mask.ratio"]);
        assert_eq!(fields(resolve(None, &["schema_version=9".into()])), ["schema_version"]);
        assert_eq!(fields(resolve(None, &["train.seed=3".into()])), ["train.seed"]);
        assert_eq!(fields(resolve(None, &["cluster.kmeans.k=3".into()])), ["encoder.k_per_channel"]);
        assert_eq!(fields(resolve(None, &["noequals".into()])), ["noequals"]);
        assert_eq!(fields(resolve(None, &["adapter.split=[0.7,0.4]".into()])), ["adapter.split"]);
        assert_eq!(fields(resolve(Some(json!([1, 2])), &[])), ["<root>"]);
    }

    #[test]
    fn derived_fields_may_repeat_their_derived_value() {
        let seed = derive_seed(0, "pretrain", 0);
        assert!(resolve(None, &[format!("train.seed={seed}")]).is_ok());
    }
}
