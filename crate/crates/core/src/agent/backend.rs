//! Agent backends: the reasoning model behind the session loop.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use wildmatch::WildMatch;

use crate::adapters::{RegistryError, ToolRegistry};
use crate::config::{AgentSection, AppConfig, BackendKind};

use super::prompt::audio_refs_in_user_message;
use super::{Role, Turn};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("agent endpoint transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("agent endpoint rejected the request: {0}")]
    Rejected(String),
    #[error("scripted backend has no response for turn {turn} (seed {seed})")]
    Unscripted { turn: usize, seed: u64 },
    #[error("credential environment variable `{0}` is not set")]
    MissingCredential(String),
    #[error("failed to load backend script {path}: {message}")]
    Script { path: PathBuf, message: String },
    #[error("config has no [agent] section")]
    NotConfigured,
}

/// Sampling parameters forwarded to the model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    /// Vendor-specific request fields passed through untouched.
    #[serde(default)]
    pub extra: serde_json::Map<String, Value>,
}

/// A reasoning model that turns the conversation so far into the next
/// assistant message.
#[async_trait]
pub trait AgentBackend: Send + Sync {
    async fn complete(&self, turns: &[Turn], seed: u64, sampling: &SamplingConfig) -> Result<String, BackendError>;
}

#[async_trait]
impl<T: AgentBackend + ?Sized> AgentBackend for Arc<T> {
    async fn complete(&self, turns: &[Turn], seed: u64, sampling: &SamplingConfig) -> Result<String, BackendError> {
        (**self).complete(turns, seed, sampling).await
    }
}

/// Chat-completions backend. Tool turns are sent as user messages carrying
/// their `<tool_result>` block, since the protocol is text-only.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: reqwest::Client,
    endpoint: String,
    model_id: String,
    auth_env: Option<String>,
    timeout: Duration,
    max_retries: u32,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            client: reqwest::Client::new(),
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            model_id: model_id.into(),
            auth_env: None,
            timeout: Duration::from_secs(120),
            max_retries: 2,
        }
    }

    pub fn from_section(section: &AgentSection) -> Self {
        let mut backend = Self::new(section.endpoint.clone().unwrap_or_default(), section.model_id.clone());
        backend.auth_env = section.auth_env.clone();
        backend.timeout = Duration::from_secs_f64(section.timeout_secs);
        backend.max_retries = section.max_retries;
        backend
    }

    pub fn request_body(&self, turns: &[Turn], seed: u64, sampling: &SamplingConfig) -> Value {
        let messages: Vec<Value> = turns
            .iter()
            .map(|t| {
                let role = match t.role {
                    Role::System => "system",
                    Role::User | Role::Tool => "user",
                    Role::Assistant => "assistant",
                };
                json!({ "role": role, "content": t.content })
            })
            .collect();
        let mut body = json!({
            "model": self.model_id,
            "messages": messages,
            "seed": seed,
        });
        let obj = body.as_object_mut().expect("object");
        if let Some(t) = sampling.temperature {
            obj.insert("temperature".into(), json!(t));
        }
        if let Some(m) = sampling.max_tokens {
            obj.insert("max_tokens".into(), json!(m));
        }
        for (k, v) in &sampling.extra {
            obj.insert(k.clone(), v.clone());
        }
        body
    }
}

#[async_trait]
impl AgentBackend for HttpBackend {
    async fn complete(&self, turns: &[Turn], seed: u64, sampling: &SamplingConfig) -> Result<String, BackendError> {
        let key = match &self.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| BackendError::MissingCredential(var.clone()))?),
            None => None,
        };
        let body = self.request_body(turns, seed, sampling);
        let url = format!("{}/chat/completions", self.endpoint);
        let attempts = self.max_retries + 1;
        let mut last = String::new();
        for attempt in 1..=attempts {
            let mut req = self.client.post(&url).timeout(self.timeout).json(&body);
            if let Some(k) = &key {
                req = req.bearer_auth(k);
            }
            match req.send().await {
                Err(e) => last = e.to_string(),
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        match resp.json::<Value>().await {
                            Ok(v) => match crate::adapters::first_choice_text(&v) {
                                Some(text) => return Ok(text),
                                None => last = "response has no choices[0].message.content".into(),
                            },
                            Err(e) => last = e.to_string(),
                        }
                    } else if status.is_server_error() || status.as_u16() == 429 || status.as_u16() == 408 {
                        last = format!("HTTP {status}");
                    } else {
                        let text = resp.text().await.unwrap_or_default();
                        return Err(BackendError::Rejected(format!("HTTP {status}: {text}")));
                    }
                }
            }
            if attempt < attempts {
                tokio::time::sleep(Duration::from_millis(500 * u64::from(attempt))).await;
            }
        }
        Err(BackendError::Transport {
            attempts,
            message: last,
        })
    }
}

/// One row of a scripted backend.
///
/// ```toml
/// version = 1
///
/// [[turns]]
/// user = "*Q07*"    # optional glob over the first user message; default "*"
/// turn = 1          # optional, 1-based assistant turn index
/// seed = 3          # optional
/// last = "*rain*"   # optional glob over the most recent message
/// text = '<tool_call>{"tool":"whisper","audio":"{audio}","prompt":"Transcribe."}</tool_call>'
/// ```
///
/// `text` may use `{audio}` (the task's first audio reference) and
/// `{tool_text}` (the text of the most recent tool result).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRow {
    #[serde(default = "any")]
    pub user: String,
    pub turn: Option<usize>,
    pub seed: Option<u64>,
    pub last: Option<String>,
    pub text: String,
}

fn any() -> String {
    "*".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBackendScript {
    #[serde(default = "one")]
    version: u32,
    #[serde(default)]
    turns: Vec<ScriptRow>,
}

fn one() -> u32 {
    1
}

/// Deterministic backend answering from a turn-indexed response table.
/// The first matching row wins.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    rows: Vec<(ScriptRow, WildMatch, Option<WildMatch>)>,
}

impl ScriptedBackend {
    pub fn from_rows(rows: impl IntoIterator<Item = ScriptRow>) -> Self {
        Self {
            rows: rows
                .into_iter()
                .map(|r| {
                    let user = WildMatch::new(&r.user);
                    let last = r.last.as_deref().map(WildMatch::new);
                    (r, user, last)
                })
                .collect(),
        }
    }

    /// A backend whose every turn is `text`.
    pub fn constant(text: impl Into<String>) -> Self {
        Self::from_rows([ScriptRow {
            user: any(),
            turn: None,
            seed: None,
            last: None,
            text: text.into(),
        }])
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let raw: RawBackendScript = toml::from_str(text).map_err(|e| e.to_string())?;
        if raw.version != 1 {
            return Err(format!("unsupported version {}", raw.version));
        }
        Ok(Self::from_rows(raw.turns))
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let script_err = |message: String| BackendError::Script {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| script_err(e.to_string()))?;
        Self::parse(&text).map_err(script_err)
    }

    fn respond(&self, turns: &[Turn], seed: u64) -> Result<String, BackendError> {
        let turn = turns.iter().filter(|t| t.role == Role::Assistant).count() + 1;
        let user = turns
            .iter()
            .find(|t| t.role == Role::User)
            .map(|t| t.content.as_str())
            .unwrap_or("");
        let last = turns.last().map(|t| t.content.as_str()).unwrap_or("");
        let row = self
            .rows
            .iter()
            .find(|(row, user_glob, last_glob)| {
                row.turn.is_none_or(|t| t == turn)
                    && row.seed.is_none_or(|s| s == seed)
                    && user_glob.matches(user)
                    && last_glob.as_ref().is_none_or(|g| g.matches(last))
            })
            .map(|(row, _, _)| row)
            .ok_or(BackendError::Unscripted { turn, seed })?;

        let mut text = row.text.clone();
        if text.contains("{audio}") {
            let audio = audio_refs_in_user_message(user).into_iter().next().unwrap_or_default();
            text = text.replace("{audio}", &audio);
        }
        if text.contains("{tool_text}") {
            let tool_text = turns
                .iter()
                .rev()
                .find(|t| t.role == Role::Tool)
                .map(|t| match &t.result {
                    Some(r) => r.agent_text(),
                    None => t.content.clone(),
                })
                .unwrap_or_default();
            text = text.replace("{tool_text}", &tool_text);
        }
        Ok(text)
    }
}

#[async_trait]
impl AgentBackend for ScriptedBackend {
    async fn complete(&self, turns: &[Turn], seed: u64, _sampling: &SamplingConfig) -> Result<String, BackendError> {
        self.respond(turns, seed)
    }
}

#[derive(Debug, Error)]
pub enum SetupError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Everything a command needs to run sessions from one config file.
#[derive(Clone)]
pub struct AgentSetup {
    pub registry: ToolRegistry,
    pub backend: Arc<dyn AgentBackend>,
    pub sampling: SamplingConfig,
    pub budget: usize,
}

impl AgentSetup {
    pub fn from_config(cfg: &AppConfig) -> Result<Self, SetupError> {
        let registry = ToolRegistry::from_config(cfg)?;
        let (backend, sampling) = backend_from_config(cfg)?;
        let budget = cfg
            .agent
            .as_ref()
            .and_then(|a| a.budget)
            .unwrap_or(super::DEFAULT_BUDGET);
        Ok(Self {
            registry,
            backend,
            sampling,
            budget,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SetupError> {
        Self::from_config(&AppConfig::load(path)?)
    }

    pub fn session_options(&self, seed: u64) -> super::SessionOptions {
        super::SessionOptions {
            budget: self.budget,
            seed,
            sampling: self.sampling.clone(),
            ..super::SessionOptions::default()
        }
    }
}

pub fn backend_from_config(cfg: &AppConfig) -> Result<(Arc<dyn AgentBackend>, SamplingConfig), BackendError> {
    let section = cfg.agent.as_ref().ok_or(BackendError::NotConfigured)?;
    let sampling = SamplingConfig {
        temperature: section.temperature,
        max_tokens: section.max_tokens,
        extra: section.extra.clone(),
    };
    let backend: Arc<dyn AgentBackend> = match section.kind {
        BackendKind::Http => Arc::new(HttpBackend::from_section(section)),
        BackendKind::Scripted => Arc::new(ScriptedBackend::load(
            section.script.as_deref().ok_or(BackendError::NotConfigured)?,
        )?),
    };
    Ok((backend, sampling))
}
