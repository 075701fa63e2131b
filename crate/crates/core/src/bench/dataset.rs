//! Line-delimited dataset files.
//!
//! One JSON object per line:
//!
//! ```json
//! {"id": "q01", "audio": "clips/q01.wav", "question": "What is heard?",
//!  "choices": ["thunder", "rain", "wind"], "answer": "rain", "categories": ["sound"]}
//! ```
//!
//! `audio` is a string or a list; `choices` is omitted for open-ended items.
//! Blank lines are ignored.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::agent::AudioTask;
use crate::sampling::{partial_shuffle, seeded_rng};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read dataset {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate id `{id}`")]
    DuplicateId { path: PathBuf, line: usize, id: String },
    #[error("subsample fraction must be in (0, 1], got {0}")]
    BadFraction(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AudioField {
    One(String),
    Many(Vec<String>),
}

impl AudioField {
    pub fn into_vec(self) -> Vec<String> {
        match self {
            AudioField::One(s) => vec![s],
            AudioField::Many(v) => v,
        }
    }
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: String,
    pub audio: AudioField,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    pub answer: Option<String>,
    #[serde(default)]
    pub categories: Vec<String>,
}

impl From<&AudioTask> for DatasetRecord {
    fn from(task: &AudioTask) -> Self {
        Self {
            id: task.id.clone(),
            audio: match task.audio_refs.as_slice() {
                [one] => AudioField::One(one.clone()),
                many => AudioField::Many(many.to_vec()),
            },
            question: task.question.clone(),
            choices: task.choices.clone(),
            answer: task.gold.clone(),
            categories: task.categories.clone(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct DatasetOptions {
    /// Relative audio paths are joined onto this directory and checked for
    /// existence; items with missing files are flagged `broken_audio`.
    /// Without a root, references are used verbatim and not checked.
    pub audio_root: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub items: Vec<AudioTask>,
    /// Sorted union of the items' categories.
    pub category_scheme: Vec<String>,
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, items: Vec<AudioTask>) -> Self {
        let category_scheme = items
            .iter()
            .flat_map(|t| t.categories.iter().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Self {
            name: name.into(),
            items,
            category_scheme,
            warnings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn broken_count(&self) -> usize {
        self.items.iter().filter(|t| t.broken_audio).count()
    }

    /// Write the dataset back out in the line-delimited format.
    pub fn to_jsonl(&self) -> String {
        self.items
            .iter()
            .map(|t| serde_json::to_string(&DatasetRecord::from(t)).expect("serializable") + "\n")
            .collect()
    }
}

pub fn load_dataset(path: impl AsRef<Path>, opts: &DatasetOptions) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string();
    parse_dataset(&text, &name, path, opts)
}

pub fn parse_dataset(text: &str, name: &str, path: &Path, opts: &DatasetOptions) -> Result<Dataset, DatasetError> {
    let malformed = |line: usize, message: String| DatasetError::Malformed {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut items = Vec::new();
    let mut ids = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(raw).map_err(|e| malformed(line, e.to_string()))?;
        if !ids.insert(record.id.clone()) {
            return Err(DatasetError::DuplicateId {
                path: path.to_path_buf(),
                line,
                id: record.id,
            });
        }
        let mut task = AudioTask {
            id: record.id,
            audio_refs: record.audio.into_vec(),
            question: record.question,
            choices: record.choices,
            gold: record.answer,
            categories: record.categories,
            broken_audio: false,
        };
        task.validate().map_err(|e| malformed(line, e.to_string()))?;
        if let Some(root) = &opts.audio_root {
            for r in &mut task.audio_refs {
                let resolved = root.join(&*r);
                if !resolved.is_file() {
                    task.broken_audio = true;
                }
                *r = resolved.to_string_lossy().into_owned();
            }
        }
        items.push(task);
    }

    let mut dataset = Dataset::new(name, items);
    if dataset.is_empty() {
        dataset.warnings.push(format!("{}: dataset is empty", path.display()));
    }
    let broken = dataset.broken_count();
    if broken > 0 {
        dataset
            .warnings
            .push(format!("{}: {broken} item(s) reference missing audio", path.display()));
    }
    for w in &dataset.warnings {
        warn!("{w}");
    }
    Ok(dataset)
}

/// Seeded sample without replacement of `round(fraction * n)` items, kept in
/// their original order.
pub fn subsample(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset, DatasetError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DatasetError::BadFraction(fraction));
    }
    let n = dataset.items.len();
    let k = ((fraction * n as f64).round() as usize).min(n);
    let mut indices: Vec<usize> = (0..n).collect();
    partial_shuffle(&mut indices, k, &mut seeded_rng(seed));
    let mut chosen = indices[..k].to_vec();
    chosen.sort_unstable();
    let mut out = Dataset::new(
        dataset.name.clone(),
        chosen.into_iter().map(|i| dataset.items[i].clone()).collect(),
    );
    out.category_scheme = dataset.category_scheme.clone();
    Ok(out)
}
