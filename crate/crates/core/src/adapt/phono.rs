//! Phonological feature presets and label files.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::head::TaskSpec;

/// Class counts of the 16 ASL-LEX 2.0 phonological features:
/// `(name, Sem-Lex classes, ASL Citizen classes)`.
pub const PHONOLOGICAL_FEATURES: [(&str, usize, usize); 16] = [
    ("Major Location", 5, 6),
    ("Minor Location", 37, 37),
    ("Second Minor Location", 37, 38),
    ("Contact", 2, 2),
    ("Thumb Contact", 3, 3),
    ("Sign Type", 6, 6),
    ("Repeated Movement", 2, 2),
    ("Path Movement", 8, 8),
    ("Wrist Twist", 2, 2),
    ("Selected Fingers", 12, 12),
    ("Thumb Position", 2, 2),
    ("Flexion", 8, 8),
    ("Spread", 3, 3),
    ("Spread Change", 3, 3),
    ("Nondominant Handshape", 56, 57),
    ("Handshape", 58, 58),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhonoDataset {
    SemLex,
    AslCitizen,
}

/// Task list for one dataset's phonological heads.
pub fn phonological_tasks(dataset: PhonoDataset) -> Vec<TaskSpec> {
    PHONOLOGICAL_FEATURES
        .iter()
        .map(|&(name, sem, cit)| TaskSpec {
            name: name.to_string(),
            n_classes: match dataset {
                PhonoDataset::SemLex => sem,
                PhonoDataset::AslCitizen => cit,
            },
        })
        .collect()
}

/// Loads a JSON list of `{"name", "n_classes"}` entries.
pub fn load_task_table(path: impl AsRef<Path>) -> Result<Vec<TaskSpec>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let tasks: Vec<TaskSpec> =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if tasks.is_empty() {
        return Err(Error::Config(format!("{} lists no tasks", path.display())));
    }
    Ok(tasks)
}

/// One line of a label file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub sequence: PathBuf,
    pub task: String,
    pub class: u32,
}

pub fn read_label_file(path: impl AsRef<Path>) -> Result<Vec<LabelRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_label_file(path: impl AsRef<Path>, records: &[LabelRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).expect("label serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_values() {
        let sem = phonological_tasks(PhonoDataset::SemLex);
        let cit = phonological_tasks(PhonoDataset::AslCitizen);
        assert_eq!(sem.len(), 16);
        let get = |v: &[TaskSpec], n: &str| v.iter().find(|t| t.name == n).unwrap().n_classes;
        assert_eq!(get(&sem, "Handshape"), 58);
        assert_eq!(get(&sem, "Minor Location"), 37);
        assert_eq!(get(&cit, "Second Minor Location"), 38);
        assert_eq!(get(&cit, "Nondominant Handshape"), 57);
        assert!(sem.iter().all(|t| t.n_classes >= 2));
    }

    #[test]
    fn table_and_label_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let table = dir.path().join("phono.json");
        fs::write(&table, serde_json::to_string(&phonological_tasks(PhonoDataset::SemLex)).unwrap()).unwrap();
        assert_eq!(load_task_table(&table).unwrap(), phonological_tasks(PhonoDataset::SemLex));

        let labels = dir.path().join("labels.jsonl");
        let recs = vec![
            LabelRecord { sequence: "a.msf".into(), task: "Handshape".into(), class: 3 },
            LabelRecord { sequence: "b.msf".into(), task: "Contact".into(), class: 1 },
        ];
        write_label_file(&labels, &recs).unwrap();
        assert_eq!(read_label_file(&labels).unwrap(), recs);
        fs::write(&labels, "{\"sequence\": 1}\n").unwrap();
        assert!(matches!(read_label_file(&labels), Err(Error::Format(_))));
    }
}
