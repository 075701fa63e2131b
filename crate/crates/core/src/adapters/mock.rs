//! Scripted responses for mock tools.
//!
//! Script format (TOML, `version = 1`):
//!
//! ```toml
//! version = 1
//!
//! [[responses]]
//! tool = "whisper"        # optional; exact tool name, absent = any tool
//! audio = "*/q01.wav"     # optional glob over the audio refs joined by ","; default "*"
//! prompt = "Transcribe*"  # optional glob over the prompt; default "*"
//! attempt = 1             # optional; 1-based attempt index, absent = any attempt
//! text = "hello world"
//! delay_ms = 0            # optional artificial latency
//! ```
//!
//! Rows are tried top to bottom and the first match wins. Globs support `*`
//! and `?` and are case-sensitive.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wildmatch::WildMatch;

pub const MOCK_SCRIPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MockScriptError {
    #[error("failed to read mock script {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid mock script {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRow {
    pub tool: Option<String>,
    #[serde(default = "any")]
    pub audio: String,
    #[serde(default = "any")]
    pub prompt: String,
    pub attempt: Option<u32>,
    pub text: String,
    #[serde(default)]
    pub delay_ms: u64,
}

fn any() -> String {
    "*".to_string()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScript {
    #[serde(default = "default_version")]
    version: u32,
    #[serde(default)]
    responses: Vec<MockRow>,
}

fn default_version() -> u32 {
    MOCK_SCRIPT_VERSION
}

#[derive(Debug, Clone, Default)]
pub struct MockScript {
    rows: Vec<(MockRow, WildMatch, WildMatch)>,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, MockScriptError> {
        let text = std::fs::read_to_string(path).map_err(|source| MockScriptError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            MockScriptError::Parse { message, .. } => MockScriptError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, MockScriptError> {
        let raw: RawScript = toml::from_str(text).map_err(|e| MockScriptError::Parse {
            path: PathBuf::new(),
            message: e.to_string(),
        })?;
        if raw.version != MOCK_SCRIPT_VERSION {
            return Err(MockScriptError::Parse {
                path: PathBuf::new(),
                message: format!("unsupported version {}", raw.version),
            });
        }
        Ok(Self::from_rows(raw.responses))
    }

    pub fn from_rows(rows: impl IntoIterator<Item = MockRow>) -> Self {
        Self {
            rows: rows
                .into_iter()
                .map(|r| {
                    let audio = WildMatch::new(&r.audio);
                    let prompt = WildMatch::new(&r.prompt);
                    (r, audio, prompt)
                })
                .collect(),
        }
    }

    pub fn lookup(&self, tool: &str, audio_refs: &[String], prompt: &str, attempt: u32) -> Option<&MockRow> {
        let audio = audio_refs.join(",");
        self.rows
            .iter()
            .find(|(row, audio_glob, prompt_glob)| {
                row.tool.as_deref().is_none_or(|t| t == tool)
                    && row.attempt.is_none_or(|a| a == attempt)
                    && audio_glob.matches(&audio)
                    && prompt_glob.matches(prompt)
            })
            .map(|(row, _, _)| row)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_match_wins() {
        let script = MockScript::parse(
            r#"
[[responses]]
tool = "a"
audio = "*q1.wav"
text = "one"

[[responses]]
audio = "*q1.wav"
text = "two"

[[responses]]
text = "fallback"
"#,
        )
        .unwrap();
        let refs = vec!["clips/q1.wav".to_string()];
        assert_eq!(script.lookup("a", &refs, "p", 1).unwrap().text, "one");
        assert_eq!(script.lookup("b", &refs, "p", 1).unwrap().text, "two");
        assert_eq!(script.lookup("b", &["x.wav".into()], "p", 1).unwrap().text, "fallback");
    }

    #[test]
    fn globs_are_case_sensitive_and_span_lines() {
        let script = MockScript::parse("[[responses]]\nprompt = \"Describe*\"\ntext = \"x\"\n").unwrap();
        assert!(script.lookup("t", &[], "Describe the\nsound", 1).is_some());
        assert!(script.lookup("t", &[], "describe the sound", 1).is_none());
    }

    #[test]
    fn rejects_bad_version_and_fields() {
        assert!(MockScript::parse("version = 2\n").is_err());
        assert!(MockScript::parse("[[responses]]\ntext = \"x\"\nweight = 3\n").is_err());
        assert!(MockScript::parse("[[responses]]\naudio = \"*\"\n").is_err());
        assert!(MockScript::parse("").unwrap().is_empty());
    }
}
