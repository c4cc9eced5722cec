//! Dataset directories: `*.msf` feature files plus an optional `labels.jsonl`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;

use multistream::adapt::{read_label_file, LabeledSet, TaskSpec};
use multistream::featio::{read_msf, FeatureSequence};
use multistream::rng::derive_rng;

pub const LABEL_FILE: &str = "labels.jsonl";

pub struct Dataset {
    /// File names relative to the dataset directory, sorted.
    pub names: Vec<String>,
    pub sequences: Vec<FeatureSequence>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let mut names: Vec<String> = fs::read_dir(dir)
            .with_context(|| format!("reading dataset directory {}", dir.display()))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".msf"))
            .collect();
        names.sort();
        if names.is_empty() {
            bail!("no .msf files in {}", dir.display());
        }
        let sequences = names
            .iter()
            .map(|n| read_msf(dir.join(n)).with_context(|| format!("reading {n}")))
            .collect::<Result<Vec<_>>>()?;
        let dims = sequences[0].dims();
        if let Some(i) = sequences.iter().position(|s| s.dims() != dims) {
            bail!("{} has channel widths {:?}, {} has {:?}", names[i], sequences[i].dims().0, names[0], dims.0);
        }
        Ok(Dataset { names, sequences })
    }

    pub fn stem(&self, i: usize) -> &str {
        self.names[i].trim_end_matches(".msf")
    }
}

/// Labeled sequences with their task table, in dataset order.
pub struct Labeled {
    pub tasks: Vec<TaskSpec>,
    pub set: LabeledSet,
}

/// Joins `labels.jsonl` with the feature files. Sequences without labels are skipped.
pub fn load_labeled(dir: &Path, data: &Dataset, tasks: &[TaskSpec]) -> Result<Labeled> {
    let records = read_label_file(dir.join(LABEL_FILE)).with_context(|| format!("reading {LABEL_FILE}"))?;
    let index: BTreeMap<&str, usize> = data.names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();

    let tasks: Vec<TaskSpec> = if tasks.is_empty() {
        let mut seen: Vec<(String, u32)> = Vec::new();
        for r in &records {
            match seen.iter_mut().find(|(n, _)| *n == r.task) {
                Some((_, m)) => *m = (*m).max(r.class),
                None => seen.push((r.task.clone(), r.class)),
            }
        }
        seen.into_iter()
            .map(|(name, max)| TaskSpec {
                name,
                n_classes: (max as usize + 1).max(2),
            })
            .collect()
    } else {
        tasks.to_vec()
    };

    let mut rows: BTreeMap<usize, Vec<Option<u32>>> = BTreeMap::new();
    for r in &records {
        let key = file_key(&r.sequence);
        let Some(&i) = index.get(key.as_str()) else {
            bail!("label for unknown sequence {}", r.sequence.display());
        };
        let Some(t) = tasks.iter().position(|t| t.name == r.task) else {
            bail!("label for task {} not in the task table", r.task);
        };
        rows.entry(i).or_insert_with(|| vec![None; tasks.len()])[t] = Some(r.class);
    }
    if rows.is_empty() {
        bail!("{LABEL_FILE} holds no labels");
    }
    let set = LabeledSet {
        sequences: rows.keys().map(|&i| data.sequences[i].clone()).collect(),
        labels: rows.into_values().collect(),
    };
    Ok(Labeled { tasks, set })
}

fn file_key(p: &Path) -> String {
    p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default()
}

pub struct Splits {
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub test: LabeledSet,
}

/// Seeded shuffle, then `[train | val | test]` by the given fractions.
pub fn split(set: &LabeledSet, fractions: [f64; 2], seed: u64) -> Result<Splits> {
    let n = set.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(seed, "cli.split", 0));
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = (fractions[1] * n as f64).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        bail!("{n} labeled sequences are too few for a {fractions:?} split");
    }
    let take = |idx: &[usize]| LabeledSet {
        sequences: idx.iter().map(|&i| set.sequences[i].clone()).collect(),
        labels: idx.iter().map(|&i| set.labels[i].clone()).collect(),
    };
    Ok(Splits {
        train: take(&order[..n_train]),
        val: take(&order[n_train..n_train + n_val]),
        test: take(&order[n_train + n_val..]),
    })
}
