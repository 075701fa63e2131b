//! Conversion from the public benchmarks' native JSON into dataset lines.
//!
//! | format | audio key | category key |
//! |--------|-----------|--------------|
//! | `mmau` | `audio_id` | `task` |
//! | `mmar` | `audio_path` | `modality` |
//! | `mmau-pro` | `audio_path` (string or list) | `category` |
//!
//! Input may be a JSON array or one object per line. Items whose answer is
//! not one of their choices (after normalization) are skipped with a warning.

use std::collections::HashSet;
use std::str::FromStr;

use serde_json::Value;
use thiserror::Error;

use super::dataset::{AudioField, DatasetRecord};
use super::matcher::normalize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceFormat {
    Mmau,
    Mmar,
    MmauPro,
}

impl FromStr for SourceFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "mmau" => Ok(Self::Mmau),
            "mmar" => Ok(Self::Mmar),
            "mmau-pro" => Ok(Self::MmauPro),
            other => Err(format!(
                "unknown source format `{other}` (expected mmau, mmar or mmau-pro)"
            )),
        }
    }
}

impl SourceFormat {
    fn audio_keys(self) -> &'static [&'static str] {
        match self {
            Self::Mmau => &["audio_id", "audio_path", "audio"],
            Self::Mmar | Self::MmauPro => &["audio_path", "audio_id", "audio"],
        }
    }

    fn category_keys(self) -> &'static [&'static str] {
        match self {
            Self::Mmau => &["task"],
            Self::Mmar => &["modality"],
            Self::MmauPro => &["category"],
        }
    }
}

#[derive(Debug, Error)]
pub enum ConvertError {
    #[error("input is neither a JSON array nor JSON lines: {0}")]
    Parse(String),
}

fn as_strings(v: &Value) -> Option<Vec<String>> {
    match v {
        Value::String(s) => Some(vec![s.clone()]),
        Value::Array(items) => items.iter().map(|i| i.as_str().map(str::to_string)).collect(),
        _ => None,
    }
}

fn parse_input(text: &str) -> Result<Vec<Value>, ConvertError> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        return serde_json::from_str(trimmed).map_err(|e| ConvertError::Parse(e.to_string()));
    }
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| ConvertError::Parse(format!("record {}: {e}", i + 1))))
        .collect()
}

fn convert_one(v: &Value, index: usize, format: SourceFormat) -> Result<DatasetRecord, String> {
    let get = |k: &str| v.get(k).filter(|x| !x.is_null());
    let id = match get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => format!("item{index:05}"),
    };
    let audio = format
        .audio_keys()
        .iter()
        .find_map(|k| get(k).and_then(as_strings))
        .filter(|a| !a.is_empty())
        .ok_or_else(|| format!("{id}: no audio path"))?;
    let question = get("question")
        .and_then(Value::as_str)
        .ok_or_else(|| format!("{id}: no question"))?
        .to_string();
    let choices = get("choices").and_then(as_strings).filter(|c| !c.is_empty());
    let mut answer = get("answer").and_then(Value::as_str).map(str::to_string);
    if let (Some(choices), Some(a)) = (&choices, &answer) {
        if !choices.contains(a) {
            let na = normalize(a);
            let hits: Vec<&String> = choices.iter().filter(|c| normalize(c) == na).collect();
            match hits.as_slice() {
                [one] => answer = Some((*one).clone()),
                _ => return Err(format!("{id}: answer `{a}` is not one of the choices")),
            }
        }
    }
    let categories = format
        .category_keys()
        .iter()
        .filter_map(|k| get(k).and_then(as_strings))
        .flatten()
        .map(|c| c.trim().to_lowercase())
        .filter(|c| !c.is_empty())
        .collect();
    Ok(DatasetRecord {
        id,
        audio: match <[String; 1]>::try_from(audio) {
            Ok([one]) => AudioField::One(one),
            Err(many) => AudioField::Many(many),
        },
        question,
        choices,
        answer,
        categories,
    })
}

/// Convert native benchmark JSON. Returns the records and per-item warnings.
pub fn convert_dataset(text: &str, format: SourceFormat) -> Result<(Vec<DatasetRecord>, Vec<String>), ConvertError> {
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    let mut ids = HashSet::new();
    for (i, v) in parse_input(text)?.iter().enumerate() {
        match convert_one(v, i, format) {
            Ok(rec) if !ids.insert(rec.id.clone()) => warnings.push(format!("{}: duplicate id, skipped", rec.id)),
            Ok(rec) => out.push(rec),
            Err(w) => warnings.push(w),
        }
    }
    Ok((out, warnings))
}
