//! The TOML configuration file shared by every command.
//!
//! ```toml
//! version = 1
//! refusal_patterns = ["can't listen"]   # optional, replaces the defaults
//!
//! [agent]
//! kind = "http"                         # or "scripted" with `script = "..."`
//! endpoint = "https://api.deepseek.com/v1"
//! model_id = "deepseek-chat"
//! auth_env = "DEEPSEEK_API_KEY"
//!
//! [[tools]]
//! name = "whisper"
//! kind = "transcription"                # chat_audio | transcription | web_search | mock
//! description = "Speech-to-text. Returns a transcript of the speech in the audio."
//! endpoint = "http://localhost:8001/v1"
//! model_id = "openai/whisper-large-v3-turbo"
//! timeout_secs = 120
//! max_retries = 2
//! ```
//!
//! Relative `script` paths resolve against the directory holding the config
//! file. Credentials are only ever named through `auth_env`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{ToolKind, ToolSpec};

pub const DEFAULT_TIMEOUT_SECS: f64 = 120.0;
pub const DEFAULT_MAX_RETRIES: u32 = 2;
pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file not found: {0}")]
    NotFound(PathBuf),
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}:{line}: field `{field}`: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },
    #[error("{path}:{line}: duplicate tool name `{name}`")]
    DuplicateTool { path: PathBuf, line: usize, name: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Scripted,
}

/// The `[agent]` table: which reasoning model drives the session loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSection {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model_id: String,
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    /// Extra request fields forwarded verbatim to the chat endpoint
    /// (vendor knobs such as `reasoning_effort`).
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
    pub script: Option<PathBuf>,
    pub budget: Option<usize>,
}

fn default_timeout_secs() -> f64 {
    DEFAULT_TIMEOUT_SECS
}

fn default_max_retries() -> u32 {
    DEFAULT_MAX_RETRIES
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTool {
    name: String,
    kind: ToolKind,
    #[serde(default)]
    description: String,
    endpoint: Option<String>,
    #[serde(default)]
    model_id: String,
    auth_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    max_retries: u32,
    multi_audio: Option<bool>,
    script: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default = "default_version")]
    version: u32,
    refusal_patterns: Option<Vec<String>>,
    agent: Option<toml::Spanned<AgentSection>>,
    #[serde(default)]
    tools: Vec<toml::Spanned<RawTool>>,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

/// A validated configuration file.
#[derive(Debug, Clone)]
pub struct AppConfig {
    pub path: PathBuf,
    pub base_dir: PathBuf,
    pub refusal_patterns: Option<Vec<String>>,
    pub agent: Option<AgentSection>,
    pub tools: Vec<ToolSpec>,
}

impl AppConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(ConfigError::NotFound(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Self::parse(&text, path, &base_dir)
    }

    /// Parse config text; `path` is only used in error messages.
    pub fn parse(text: &str, path: &Path, base_dir: &Path) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let line_of = |offset: usize| text[..offset.min(text.len())].matches('\n').count() + 1;
        let schema = |line: usize, field: &str, message: String| ConfigError::Schema {
            path: path.to_path_buf(),
            line,
            field: field.to_string(),
            message,
        };

        if raw.version != CONFIG_VERSION {
            return Err(schema(
                1,
                "version",
                format!("unsupported version {} (expected {CONFIG_VERSION})", raw.version),
            ));
        }

        let mut seen: HashMap<String, usize> = HashMap::new();
        let mut tools = Vec::with_capacity(raw.tools.len());
        for spanned in raw.tools {
            let line = line_of(spanned.span().start);
            let raw = spanned.into_inner();
            let spec = validate_tool(raw, base_dir).map_err(|(field, msg)| schema(line, field, msg))?;
            if seen.insert(spec.name.clone(), line).is_some() {
                return Err(ConfigError::DuplicateTool {
                    path: path.to_path_buf(),
                    line,
                    name: spec.name,
                });
            }
            tools.push(spec);
        }

        let agent = match raw.agent {
            None => None,
            Some(spanned) => {
                let line = line_of(spanned.span().start);
                let mut agent = spanned.into_inner();
                validate_agent(&mut agent, base_dir).map_err(|(field, msg)| schema(line, field, msg))?;
                Some(agent)
            }
        };

        Ok(Self {
            path: path.to_path_buf(),
            base_dir: base_dir.to_path_buf(),
            refusal_patterns: raw.refusal_patterns,
            agent,
            tools,
        })
    }
}

pub(crate) fn valid_tool_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

fn timeout_from(secs: f64) -> Result<Duration, (&'static str, String)> {
    if secs.is_finite() && secs > 0.0 {
        Ok(Duration::from_secs_f64(secs))
    } else {
        Err(("timeout_secs", format!("must be > 0, got {secs}")))
    }
}

fn validate_tool(raw: RawTool, base_dir: &Path) -> Result<ToolSpec, (&'static str, String)> {
    if !valid_tool_name(&raw.name) {
        return Err(("name", format!("`{}` must match [a-z0-9_]+", raw.name)));
    }
    if raw.description.trim().is_empty() {
        return Err(("description", "must not be empty".into()));
    }
    let timeout = timeout_from(raw.timeout_secs)?;
    match raw.kind {
        ToolKind::Mock => {
            if raw.endpoint.is_some() {
                return Err(("endpoint", "mock tools take a `script`, not an endpoint".into()));
            }
            if raw.script.is_none() {
                return Err(("script", "mock tools require a script file".into()));
            }
        }
        ToolKind::ChatAudio | ToolKind::Transcription | ToolKind::WebSearch => {
            if raw.endpoint.as_deref().is_none_or(str::is_empty) {
                return Err(("endpoint", format!("required for kind `{}`", raw.kind)));
            }
            if raw.script.is_some() {
                return Err(("script", "only mock tools take a script".into()));
            }
            if raw.kind != ToolKind::WebSearch && raw.model_id.is_empty() {
                return Err(("model_id", format!("required for kind `{}`", raw.kind)));
            }
        }
    }
    let multi_audio = raw.multi_audio.unwrap_or(match raw.kind {
        ToolKind::ChatAudio | ToolKind::Mock => true,
        ToolKind::Transcription | ToolKind::WebSearch => false,
    });
    Ok(ToolSpec {
        name: raw.name,
        kind: raw.kind,
        description: raw.description.trim().to_string(),
        endpoint: raw.endpoint.map(|e| e.trim_end_matches('/').to_string()),
        model_id: raw.model_id,
        auth_env: raw.auth_env,
        timeout,
        max_retries: raw.max_retries,
        multi_audio,
        script: raw.script.map(|s| base_dir.join(s)),
    })
}

fn validate_agent(agent: &mut AgentSection, base_dir: &Path) -> Result<(), (&'static str, String)> {
    timeout_from(agent.timeout_secs)?;
    match agent.kind {
        BackendKind::Http => {
            if agent.endpoint.as_deref().is_none_or(str::is_empty) {
                return Err(("endpoint", "required for an http agent".into()));
            }
            if agent.model_id.is_empty() {
                return Err(("model_id", "required for an http agent".into()));
            }
        }
        BackendKind::Scripted => match &agent.script {
            None => return Err(("script", "required for a scripted agent".into())),
            Some(s) => agent.script = Some(base_dir.join(s)),
        },
    }
    Ok(())
}
