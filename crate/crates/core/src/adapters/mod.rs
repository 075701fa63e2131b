//! Tool adapters: one uniform `invoke` over chat-with-audio endpoints,
//! transcription endpoints, web search and scripted mocks.

mod http;
mod mock;

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::config::{AppConfig, ConfigError};
use crate::tagparse::ToolCallRequest;

pub(crate) use http::first_choice_text;
pub use mock::{MockRow, MockScript, MockScriptError};

/// Substrings (matched case-insensitively) that mark a tool reply as a refusal.
pub const DEFAULT_REFUSAL_PATTERNS: &[&str] = &[
    "can't listen",
    "can’t listen",
    "cannot listen",
    "unable to listen",
    "unable to process audio",
    "i cannot hear",
    "i can't hear",
    "unable to access the audio",
    "cannot process audio",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolKind {
    ChatAudio,
    Transcription,
    WebSearch,
    Mock,
}

impl fmt::Display for ToolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToolKind::ChatAudio => "chat_audio",
            ToolKind::Transcription => "transcription",
            ToolKind::WebSearch => "web_search",
            ToolKind::Mock => "mock",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub kind: ToolKind,
    pub description: String,
    pub endpoint: Option<String>,
    pub model_id: String,
    /// Name of the environment variable holding the bearer credential.
    pub auth_env: Option<String>,
    #[serde(with = "crate::duration_secs")]
    pub timeout: Duration,
    pub max_retries: u32,
    /// Whether one call may carry more than one audio reference.
    pub multi_audio: bool,
    pub script: Option<PathBuf>,
}

impl ToolSpec {
    pub fn max_attempts(&self) -> u32 {
        self.max_retries.saturating_add(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Transport,
    Timeout,
    EmptyResponse,
    /// The endpoint answered with a non-retryable status.
    Rejected,
    /// A mock script had no row for the request.
    Unscripted,
}

/// Why a dispatched call produced no usable text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolFailure {
    pub kind: FailureKind,
    pub message: String,
}

impl fmt::Display for ToolFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.message)
    }
}

/// Outcome of one `invoke`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub tool_name: String,
    pub text: String,
    #[serde(with = "crate::duration_secs")]
    pub latency: Duration,
    pub attempts: u32,
    pub refusal: bool,
    pub error: Option<ToolFailure>,
}

impl ToolResult {
    /// The text handed back to the agent for this result.
    pub fn agent_text(&self) -> String {
        match &self.error {
            None => self.text.clone(),
            Some(e) => format!(
                "Error: tool `{}` failed after {} attempt(s): {}",
                self.tool_name, self.attempts, e.message
            ),
        }
    }
}

/// Failures detected before anything is dispatched. The session loop turns
/// these into tool messages; they never abort a session.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ToolError {
    #[error("unknown tool `{name}`; available tools: {available}")]
    UnknownTool { name: String, available: String },
    #[error("audio file `{path}` is unreadable: {reason}")]
    AudioUnreadable { path: String, reason: String },
    #[error("tool `{tool}` needs an audio reference but none was given")]
    MissingAudio { tool: String },
    #[error("tool `{tool}` accepts a single audio file per call but got {count}; call it once per file")]
    MultiAudioUnsupported { tool: String, count: usize },
    #[error("credential environment variable `{var}` for tool `{tool}` is not set")]
    MissingCredential { tool: String, var: String },
}

/// Case-insensitive substring matcher for refusal replies.
#[derive(Debug, Clone)]
pub struct RefusalDetector {
    patterns: Vec<String>,
}

impl Default for RefusalDetector {
    fn default() -> Self {
        Self::new(DEFAULT_REFUSAL_PATTERNS.iter().copied())
    }
}

impl RefusalDetector {
    pub fn new<I, S>(patterns: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            patterns: patterns
                .into_iter()
                .map(|p| p.as_ref().to_lowercase())
                .filter(|p| !p.is_empty())
                .collect(),
        }
    }

    pub fn is_refusal(&self, text: &str) -> bool {
        if text.is_empty() {
            return false;
        }
        let lower = text.to_lowercase();
        self.patterns.iter().any(|p| lower.contains(p.as_str()))
    }

    pub fn patterns(&self) -> &[String] {
        &self.patterns
    }
}

/// Refusal check against the default pattern list.
pub fn detect_refusal(text: &str) -> bool {
    RefusalDetector::default().is_refusal(text)
}

/// Audio bytes loaded for an HTTP dispatch.
pub(crate) struct AudioPayload {
    pub file_name: String,
    pub format: String,
    pub bytes: Vec<u8>,
}

pub(crate) enum AttemptError {
    Retryable(ToolFailure),
    Fatal(ToolFailure),
}

/// The immutable set of tools available to sessions.
#[derive(Clone)]
pub struct ToolRegistry {
    specs: Vec<ToolSpec>,
    index: HashMap<String, usize>,
    scripts: HashMap<String, Arc<MockScript>>,
    refusal: RefusalDetector,
    http: reqwest::Client,
}

impl fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ToolRegistry")
            .field("tools", &self.names().collect::<Vec<_>>())
            .finish()
    }
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Script(#[from] MockScriptError),
    #[error("duplicate tool name `{0}`")]
    DuplicateTool(String),
    #[error("unknown tool `{0}` in subset")]
    UnknownTool(String),
}

/// Load and validate the tool registry from a config file.
pub fn load_registry(config_path: impl AsRef<Path>) -> Result<ToolRegistry, RegistryError> {
    let cfg = AppConfig::load(config_path)?;
    ToolRegistry::from_config(&cfg)
}

impl ToolRegistry {
    pub fn empty() -> Self {
        Self {
            specs: Vec::new(),
            index: HashMap::new(),
            scripts: HashMap::new(),
            refusal: RefusalDetector::default(),
            http: reqwest::Client::new(),
        }
    }

    pub fn from_config(cfg: &AppConfig) -> Result<Self, RegistryError> {
        let mut scripts = HashMap::new();
        for spec in &cfg.tools {
            if let (ToolKind::Mock, Some(path)) = (spec.kind, &spec.script) {
                scripts.insert(spec.name.clone(), Arc::new(MockScript::load(path)?));
            }
        }
        let refusal = cfg
            .refusal_patterns
            .as_ref()
            .map(RefusalDetector::new)
            .unwrap_or_default();
        Self::build(cfg.tools.clone(), scripts, refusal)
    }

    /// Build a registry from specs and in-memory mock scripts.
    pub fn with_mocks(
        specs: Vec<ToolSpec>,
        scripts: impl IntoIterator<Item = (String, MockScript)>,
    ) -> Result<Self, RegistryError> {
        let scripts = scripts
            .into_iter()
            .map(|(name, script)| (name, Arc::new(script)))
            .collect();
        Self::build(specs, scripts, RefusalDetector::default())
    }

    fn build(
        specs: Vec<ToolSpec>,
        scripts: HashMap<String, Arc<MockScript>>,
        refusal: RefusalDetector,
    ) -> Result<Self, RegistryError> {
        let mut index = HashMap::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            if index.insert(spec.name.clone(), i).is_some() {
                return Err(RegistryError::DuplicateTool(spec.name.clone()));
            }
        }
        Ok(Self {
            specs,
            index,
            scripts,
            refusal,
            http: reqwest::Client::new(),
        })
    }

    pub fn with_refusal(mut self, refusal: RefusalDetector) -> Self {
        self.refusal = refusal;
        self
    }

    /// A registry holding only the named tools, in this registry's order.
    pub fn restrict<S: AsRef<str>>(&self, names: &[S]) -> Result<Self, RegistryError> {
        for n in names {
            if !self.index.contains_key(n.as_ref()) {
                return Err(RegistryError::UnknownTool(n.as_ref().to_string()));
            }
        }
        let keep: Vec<ToolSpec> = self
            .specs
            .iter()
            .filter(|s| names.iter().any(|n| n.as_ref() == s.name))
            .cloned()
            .collect();
        let scripts = self
            .scripts
            .iter()
            .filter(|(k, _)| keep.iter().any(|s| &s.name == *k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let mut out = Self::build(keep, scripts, self.refusal.clone())?;
        out.http = self.http.clone();
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[ToolSpec] {
        &self.specs
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.specs.iter().map(|s| s.name.as_str())
    }

    /// Exact, case-sensitive lookup.
    pub fn get(&self, name: &str) -> Option<&ToolSpec> {
        self.index.get(name).map(|&i| &self.specs[i])
    }

    pub fn refusal(&self) -> &RefusalDetector {
        &self.refusal
    }

    /// Invoke a tool, retrying transport failures and refusals up to the
    /// tool's `max_retries`.
    pub async fn invoke(&self, call: &ToolCallRequest) -> Result<ToolResult, ToolError> {
        let spec = self.get(&call.tool_name).ok_or_else(|| ToolError::UnknownTool {
            name: call.tool_name.clone(),
            available: if self.specs.is_empty() {
                "(none)".to_string()
            } else {
                self.names().collect::<Vec<_>>().join(", ")
            },
        })?;
        if call.audio_refs.len() > 1 && !spec.multi_audio {
            return Err(ToolError::MultiAudioUnsupported {
                tool: spec.name.clone(),
                count: call.audio_refs.len(),
            });
        }
        let audio = match spec.kind {
            ToolKind::ChatAudio | ToolKind::Transcription => {
                if call.audio_refs.is_empty() {
                    return Err(ToolError::MissingAudio {
                        tool: spec.name.clone(),
                    });
                }
                read_audio(&call.audio_refs).await?
            }
            ToolKind::WebSearch | ToolKind::Mock => Vec::new(),
        };
        let credential = match &spec.auth_env {
            Some(var) if spec.kind != ToolKind::Mock => {
                Some(std::env::var(var).map_err(|_| ToolError::MissingCredential {
                    tool: spec.name.clone(),
                    var: var.clone(),
                })?)
            }
            _ => None,
        };

        let started = Instant::now();
        let max_attempts = spec.max_attempts();
        let mut attempt = 0;
        loop {
            attempt += 1;
            let dispatched = tokio::time::timeout(
                spec.timeout,
                self.dispatch(spec, call, &audio, credential.as_deref(), attempt),
            )
            .await;
            let failure = match dispatched {
                Err(_) => ToolFailure {
                    kind: FailureKind::Timeout,
                    message: format!("no response within {:.1}s", spec.timeout.as_secs_f64()),
                },
                Ok(Err(AttemptError::Fatal(failure))) => {
                    return Ok(failed(spec, failure, attempt, started));
                }
                Ok(Err(AttemptError::Retryable(failure))) => failure,
                Ok(Ok(text)) if text.trim().is_empty() => ToolFailure {
                    kind: FailureKind::EmptyResponse,
                    message: "endpoint returned empty text".into(),
                },
                Ok(Ok(text)) => {
                    let refusal = self.refusal.is_refusal(&text);
                    if refusal && attempt < max_attempts {
                        debug!(tool = %spec.name, attempt, "refusal detected, retrying");
                        continue;
                    }
                    return Ok(ToolResult {
                        tool_name: spec.name.clone(),
                        text,
                        latency: started.elapsed(),
                        attempts: attempt,
                        refusal,
                        error: None,
                    });
                }
            };
            debug!(tool = %spec.name, attempt, %failure, "attempt failed");
            if attempt >= max_attempts {
                return Ok(failed(spec, failure, attempt, started));
            }
            if spec.kind != ToolKind::Mock {
                tokio::time::sleep(Duration::from_millis(200 * u64::from(attempt))).await;
            }
        }
    }

    async fn dispatch(
        &self,
        spec: &ToolSpec,
        call: &ToolCallRequest,
        audio: &[AudioPayload],
        credential: Option<&str>,
        attempt: u32,
    ) -> Result<String, AttemptError> {
        match spec.kind {
            ToolKind::Mock => {
                let script = self.scripts.get(&spec.name).ok_or_else(|| {
                    AttemptError::Fatal(ToolFailure {
                        kind: FailureKind::Unscripted,
                        message: format!("no script loaded for mock tool `{}`", spec.name),
                    })
                })?;
                let row = script
                    .lookup(&spec.name, &call.audio_refs, &call.prompt, attempt)
                    .ok_or_else(|| {
                        AttemptError::Fatal(ToolFailure {
                            kind: FailureKind::Unscripted,
                            message: format!(
                                "mock script has no response for audio {:?}, prompt {:?}, attempt {attempt}",
                                call.audio_refs, call.prompt
                            ),
                        })
                    })?;
                if row.delay_ms > 0 {
                    tokio::time::sleep(Duration::from_millis(row.delay_ms)).await;
                }
                Ok(row.text.clone())
            }
            ToolKind::ChatAudio => http::chat_audio(&self.http, spec, &call.prompt, audio, credential).await,
            ToolKind::Transcription => http::transcription(&self.http, spec, &audio[0], credential).await,
            ToolKind::WebSearch => http::web_search(&self.http, spec, &call.prompt, credential).await,
        }
    }
}

fn failed(spec: &ToolSpec, failure: ToolFailure, attempts: u32, started: Instant) -> ToolResult {
    ToolResult {
        tool_name: spec.name.clone(),
        text: String::new(),
        latency: started.elapsed(),
        attempts,
        refusal: false,
        error: Some(failure),
    }
}

async fn read_audio(refs: &[String]) -> Result<Vec<AudioPayload>, ToolError> {
    let mut out = Vec::with_capacity(refs.len());
    for r in refs {
        let bytes = tokio::fs::read(r).await.map_err(|e| ToolError::AudioUnreadable {
            path: r.clone(),
            reason: e.to_string(),
        })?;
        let path = Path::new(r);
        let format = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_lowercase)
            .unwrap_or_else(|| "wav".to_string());
        let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("audio").to_string();
        out.push(AudioPayload {
            file_name,
            format,
            bytes,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn mock_spec(name: &str, max_retries: u32) -> ToolSpec {
        ToolSpec {
            name: name.into(),
            kind: ToolKind::Mock,
            description: format!("mock tool {name}"),
            endpoint: None,
            model_id: String::new(),
            auth_env: None,
            timeout: Duration::from_secs(5),
            max_retries,
            multi_audio: true,
            script: None,
        }
    }

    fn registry(script: &str, max_retries: u32) -> ToolRegistry {
        ToolRegistry::with_mocks(
            vec![mock_spec("whisper", max_retries)],
            [("whisper".to_string(), MockScript::parse(script).unwrap())],
        )
        .unwrap()
    }

    #[test]
    fn refusal_detection() {
        assert!(detect_refusal("I'm sorry, I can't listen to audio files."));
        assert!(detect_refusal("I CANNOT LISTEN to that"));
        assert!(detect_refusal("Unfortunately I am unable to process audio input."));
        assert!(!detect_refusal("The audio contains rain and thunder."));
        assert!(!detect_refusal(""));
        let custom = RefusalDetector::new(["no comprende"]);
        assert!(custom.is_refusal("No comprende, amigo"));
        assert!(!custom.is_refusal("I can't listen"));
    }

    #[tokio::test]
    async fn scripted_lookup() {
        let reg = registry(
            r#"
[[responses]]
tool = "whisper"
audio = "/a.wav"
prompt = "Transcribe*"
text = "hello world"
"#,
            2,
        );
        let r = reg
            .invoke(&ToolCallRequest::new("whisper", ["/a.wav"], "Transcribe this audio."))
            .await
            .unwrap();
        assert_eq!(r.text, "hello world");
        assert_eq!(r.attempts, 1);
        assert!(!r.refusal);
        assert!(r.error.is_none());
    }

    #[tokio::test]
    async fn refusal_then_answer_is_retried() {
        let reg = registry(
            r#"
[[responses]]
attempt = 1
text = "I cannot listen to audio."

[[responses]]
attempt = 2
text = "It is rain."
"#,
            2,
        );
        let r = reg
            .invoke(&ToolCallRequest::new("whisper", ["/a.wav"], "What is it?"))
            .await
            .unwrap();
        assert_eq!(r.text, "It is rain.");
        assert_eq!(r.attempts, 2);
        assert!(!r.refusal);
    }

    #[tokio::test]
    async fn persistent_refusal_is_flagged_after_all_attempts() {
        let reg = registry("[[responses]]\ntext = \"I can't listen to audio.\"\n", 2);
        let r = reg
            .invoke(&ToolCallRequest::new("whisper", ["/a.wav"], "?"))
            .await
            .unwrap();
        assert_eq!(r.attempts, 3);
        assert!(r.refusal);
        assert!(r.error.is_none());
    }

    #[tokio::test]
    async fn unscripted_request_is_an_error_result() {
        let reg = registry("[[responses]]\naudio = \"/b.wav\"\ntext = \"x\"\n", 2);
        let r = reg
            .invoke(&ToolCallRequest::new("whisper", ["/a.wav"], "?"))
            .await
            .unwrap();
        assert_eq!(r.attempts, 1);
        assert_eq!(r.error.as_ref().unwrap().kind, FailureKind::Unscripted);
        assert!(r.agent_text().starts_with("Error: tool `whisper`"));
    }

    #[tokio::test]
    async fn timeouts_exhaust_retries() {
        let mut spec = mock_spec("slow", 1);
        spec.timeout = Duration::from_millis(20);
        let reg = ToolRegistry::with_mocks(
            vec![spec],
            [(
                "slow".to_string(),
                MockScript::parse("[[responses]]\ntext = \"late\"\ndelay_ms = 5000\n").unwrap(),
            )],
        )
        .unwrap();
        let started = Instant::now();
        let r = reg
            .invoke(&ToolCallRequest::new("slow", ["/a.wav"], "?"))
            .await
            .unwrap();
        assert!(started.elapsed() < Duration::from_secs(2));
        assert_eq!(r.attempts, 2);
        assert_eq!(r.error.unwrap().kind, FailureKind::Timeout);
    }

    #[tokio::test]
    async fn unknown_tool() {
        let reg = registry("[[responses]]\ntext = \"x\"\n", 0);
        let err = reg
            .invoke(&ToolCallRequest::new("whispr", ["/a.wav"], "?"))
            .await
            .unwrap_err();
        assert!(matches!(err, ToolError::UnknownTool { .. }));
        assert!(err.to_string().contains("whisper"));
    }

    #[tokio::test]
    async fn multi_audio_rejected_for_single_audio_tools() {
        let mut spec = mock_spec("asr", 0);
        spec.multi_audio = false;
        let reg = ToolRegistry::with_mocks(
            vec![spec],
            [(
                "asr".to_string(),
                MockScript::parse("[[responses]]\ntext = \"x\"\n").unwrap(),
            )],
        )
        .unwrap();
        let err = reg
            .invoke(&ToolCallRequest::new("asr", ["/a.wav", "/b.wav"], "?"))
            .await
            .unwrap_err();
        assert_eq!(
            err,
            ToolError::MultiAudioUnsupported {
                tool: "asr".into(),
                count: 2
            }
        );
    }

    #[tokio::test]
    async fn http_tools_need_readable_audio() {
        let spec = ToolSpec {
            kind: ToolKind::ChatAudio,
            endpoint: Some("http://127.0.0.1:9".into()),
            model_id: "m".into(),
            ..mock_spec("omni", 0)
        };
        let reg = ToolRegistry::with_mocks(vec![spec], []).unwrap();
        let err = reg
            .invoke(&ToolCallRequest::new("omni", ["/no/such/file.wav"], "?"))
            .await
            .unwrap_err();
        assert!(matches!(err, ToolError::AudioUnreadable { .. }));
    }

    #[test]
    fn restrict_keeps_order_and_rejects_unknown() {
        let specs = vec![mock_spec("a", 0), mock_spec("b", 0), mock_spec("c", 0)];
        let reg = ToolRegistry::with_mocks(specs, []).unwrap();
        let sub = reg.restrict(&["c", "a"]).unwrap();
        assert_eq!(sub.names().collect::<Vec<_>>(), vec!["a", "c"]);
        assert!(reg.restrict(&["z"]).is_err());
        assert!(reg.restrict::<&str>(&[]).unwrap().is_empty());
    }

    #[test]
    fn duplicate_specs_rejected() {
        let err = ToolRegistry::with_mocks(vec![mock_spec("a", 0), mock_spec("a", 0)], []).unwrap_err();
        assert!(matches!(err, RegistryError::DuplicateTool(n) if n == "a"));
    }

    proptest! {
        #[test]
        fn lookup_is_exact(name in "[a-z0-9_]{1,10}", edit in 0usize..3) {
            let reg = ToolRegistry::with_mocks(vec![mock_spec(&name, 0)], []).unwrap();
            prop_assert!(reg.get(&name).is_some());
            let near = match edit {
                0 => name.to_uppercase(),
                1 => format!("{name}_"),
                _ => format!(" {name}"),
            };
            prop_assume!(near != name);
            prop_assert!(reg.get(&near).is_none());
        }
    }
}
