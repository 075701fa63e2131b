//! The session loop: prompt the reasoning model, execute the tool calls it
//! emits, feed results back, stop on an answer or when the tool budget runs
//! out.

mod backend;
mod prompt;

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::adapters::{ToolRegistry, ToolResult};
use crate::tagparse::{parse_turn, ParsedTurn, ToolCallRequest};

pub use backend::{
    backend_from_config, AgentBackend, AgentSetup, BackendError, HttpBackend, SamplingConfig, ScriptRow,
    ScriptedBackend, SetupError,
};
pub use prompt::{
    audio_refs_in_user_message, build_system_prompt, build_user_message, choice_label, NUDGE_MESSAGE,
    SYSTEM_PROMPT_HEADER, TOOL_BLOCK_PREFIX,
};

pub const DEFAULT_BUDGET: usize = 20;
pub const DEFAULT_MAX_IDLE_TURNS: usize = 3;

/// One question instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioTask {
    pub id: String,
    pub audio_refs: Vec<String>,
    pub question: String,
    pub choices: Option<Vec<String>>,
    pub gold: Option<String>,
    #[serde(default)]
    pub categories: Vec<String>,
    /// Set by dataset loading when an audio file could not be found.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub broken_audio: bool,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TaskError {
    #[error("task has no audio references")]
    NoAudio,
    #[error("task has {0} choice(s); at least 2 are required")]
    TooFewChoices(usize),
    #[error("gold answer `{0}` matches no choice exactly once")]
    GoldNotAChoice(String),
}

impl AudioTask {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.audio_refs.is_empty() {
            return Err(TaskError::NoAudio);
        }
        if let Some(choices) = &self.choices {
            if choices.len() < 2 {
                return Err(TaskError::TooFewChoices(choices.len()));
            }
            if let Some(gold) = &self.gold {
                if choices.iter().filter(|c| *c == gold).count() != 1 {
                    return Err(TaskError::GoldNotAChoice(gold.clone()));
                }
            }
        }
        Ok(())
    }

    /// Index of the gold answer among the choices.
    pub fn gold_index(&self) -> Option<usize> {
        let gold = self.gold.as_ref()?;
        self.choices.as_ref()?.iter().position(|c| c == gold)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

/// One message in a session. Tool turns also carry the request that caused
/// them and, when the tool was dispatched, its result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub call: Option<ToolCallRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<ToolResult>,
}

impl Turn {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            call: None,
            result: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionOutcome {
    Answered,
    BudgetExhausted,
    AgentError,
}

/// Complete record of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTrace {
    pub task_id: String,
    pub turns: Vec<Turn>,
    pub tool_call_count: usize,
    pub budget: usize,
    pub outcome: SessionOutcome,
    pub answer: Option<String>,
    /// Why the session ended in `agent_error`.
    pub error: Option<String>,
    pub seed: u64,
    #[serde(with = "crate::duration_secs")]
    pub wall_time: Duration,
}

impl SessionTrace {
    /// Copy with all timing fields zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        let mut t = self.clone();
        t.wall_time = Duration::ZERO;
        for turn in &mut t.turns {
            if let Some(r) = &mut turn.result {
                r.latency = Duration::ZERO;
            }
        }
        t
    }
}

pub fn answer_of(trace: &SessionTrace) -> Option<&str> {
    match trace.outcome {
        SessionOutcome::Answered => trace.answer.as_deref(),
        SessionOutcome::BudgetExhausted | SessionOutcome::AgentError => None,
    }
}

#[derive(Debug, Clone)]
pub struct SessionOptions {
    pub budget: usize,
    pub seed: u64,
    pub sampling: SamplingConfig,
    /// Consecutive assistant turns with neither a tool call nor an answer
    /// tolerated before the session is abandoned.
    pub max_idle_turns: usize,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            seed: 0,
            sampling: SamplingConfig::default(),
            max_idle_turns: DEFAULT_MAX_IDLE_TURNS,
        }
    }
}

impl SessionOptions {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

/// Live progress of a session, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AgentEvent {
    SessionStarted {
        task_id: String,
        budget: usize,
    },
    AssistantText {
        text: String,
    },
    ToolCallStarted {
        index: usize,
        call: ToolCallRequest,
    },
    ToolResult {
        index: usize,
        call: ToolCallRequest,
        result: Option<ToolResult>,
        text: String,
    },
    Answer {
        answer: String,
    },
    SessionEnded {
        outcome: SessionOutcome,
        tool_call_count: usize,
        error: Option<String>,
    },
}

pub trait SessionObserver: Send + Sync {
    fn on_event(&self, event: AgentEvent);
}

/// Observer that drops every event.
pub struct NoopObserver;

impl SessionObserver for NoopObserver {
    fn on_event(&self, _event: AgentEvent) {}
}

fn tool_message(tool: &str, body: &str, failed: bool) -> String {
    let status = if failed { " status=\"error\"" } else { "" };
    format!("<tool_result tool=\"{tool}\"{status}>\n{body}\n</tool_result>")
}

fn idle_reminder(parsed: &ParsedTurn) -> String {
    let mut msg = String::from(
        "Your last message contained no valid tool call and no answer. \
Call a tool using <tool_call> tags or give your final answer between <answer> and </answer> tags.",
    );
    for d in &parsed.diagnostics {
        msg.push_str(&format!("\nProblem: {d}"));
    }
    msg
}

/// Run one question to completion.
pub async fn run_session(
    task: &AudioTask,
    backend: &dyn AgentBackend,
    registry: &ToolRegistry,
    opts: &SessionOptions,
) -> SessionTrace {
    run_session_observed(task, backend, registry, opts, &NoopObserver).await
}

pub async fn run_session_observed(
    task: &AudioTask,
    backend: &dyn AgentBackend,
    registry: &ToolRegistry,
    opts: &SessionOptions,
    observer: &dyn SessionObserver,
) -> SessionTrace {
    let started = Instant::now();
    let mut trace = SessionTrace {
        task_id: task.id.clone(),
        turns: Vec::new(),
        tool_call_count: 0,
        budget: opts.budget,
        outcome: SessionOutcome::AgentError,
        answer: None,
        error: None,
        seed: opts.seed,
        wall_time: Duration::ZERO,
    };
    observer.on_event(AgentEvent::SessionStarted {
        task_id: task.id.clone(),
        budget: opts.budget,
    });

    let finish = |mut trace: SessionTrace, outcome: SessionOutcome, error: Option<String>| {
        trace.outcome = outcome;
        trace.error = error;
        trace.wall_time = started.elapsed();
        if let Some(answer) = &trace.answer {
            observer.on_event(AgentEvent::Answer { answer: answer.clone() });
        }
        observer.on_event(AgentEvent::SessionEnded {
            outcome,
            tool_call_count: trace.tool_call_count,
            error: trace.error.clone(),
        });
        trace
    };

    if let Err(e) = task.validate() {
        return finish(trace, SessionOutcome::AgentError, Some(format!("invalid task: {e}")));
    }

    trace.turns.push(Turn::new(Role::System, build_system_prompt(registry)));
    trace.turns.push(Turn::new(Role::User, build_user_message(task)));
    let mut idle = 0;

    loop {
        let text = match backend.complete(&trace.turns, opts.seed, &opts.sampling).await {
            Ok(text) => text,
            Err(e) => {
                warn!(task = %task.id, error = %e, "agent backend failed");
                return finish(trace, SessionOutcome::AgentError, Some(e.to_string()));
            }
        };
        observer.on_event(AgentEvent::AssistantText { text: text.clone() });
        let parsed = parse_turn(&text);
        trace.turns.push(Turn::new(Role::Assistant, text));

        if parsed.tool_calls.is_empty() {
            if let Some(answer) = parsed.answer {
                trace.answer = Some(answer);
                return finish(trace, SessionOutcome::Answered, None);
            }
            idle += 1;
            if idle >= opts.max_idle_turns {
                let msg = format!("no tool call or answer in {idle} consecutive turns");
                return finish(trace, SessionOutcome::AgentError, Some(msg));
            }
            trace.turns.push(Turn::new(Role::User, idle_reminder(&parsed)));
            continue;
        }
        idle = 0;
        if parsed.answer.is_some() {
            debug!(task = %task.id, "turn has tool calls and an answer; answer ignored");
        }

        for located in &parsed.tool_calls {
            if trace.tool_call_count >= opts.budget {
                break;
            }
            let call = located.request.clone();
            let index = trace.tool_call_count;
            observer.on_event(AgentEvent::ToolCallStarted {
                index,
                call: call.clone(),
            });
            let (result, body, failed) = match registry.invoke(&call).await {
                Ok(result) => {
                    let body = result.agent_text();
                    let failed = result.error.is_some();
                    (Some(result), body, failed)
                }
                Err(e) => (None, format!("Error: {e}"), true),
            };
            trace.tool_call_count += 1;
            observer.on_event(AgentEvent::ToolResult {
                index,
                call: call.clone(),
                result: result.clone(),
                text: body.clone(),
            });
            trace.turns.push(Turn {
                role: Role::Tool,
                content: tool_message(&call.tool_name, &body, failed),
                call: Some(call),
                result,
            });
        }

        if trace.tool_call_count >= opts.budget {
            trace.turns.push(Turn::new(Role::User, NUDGE_MESSAGE));
            let text = match backend.complete(&trace.turns, opts.seed, &opts.sampling).await {
                Ok(text) => text,
                Err(e) => return finish(trace, SessionOutcome::AgentError, Some(e.to_string())),
            };
            observer.on_event(AgentEvent::AssistantText { text: text.clone() });
            let parsed = parse_turn(&text);
            trace.turns.push(Turn::new(Role::Assistant, text));
            return match parsed.answer {
                Some(answer) => {
                    trace.answer = Some(answer);
                    finish(trace, SessionOutcome::Answered, None)
                }
                None => finish(trace, SessionOutcome::BudgetExhausted, None),
            };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{MockScript, ToolKind, ToolSpec};
    use crate::tagparse::render_tool_call;
    use async_trait::async_trait;
    use std::sync::Mutex;

    fn task() -> AudioTask {
        AudioTask {
            id: "t1".into(),
            audio_refs: vec!["/a.wav".into()],
            question: "What is heard?".into(),
            choices: Some(vec!["hello world".into(), "goodbye".into()]),
            gold: Some("hello world".into()),
            categories: vec!["speech".into()],
            broken_audio: false,
        }
    }

    fn whisper_registry() -> ToolRegistry {
        let spec = ToolSpec {
            name: "whisper".into(),
            kind: ToolKind::Mock,
            description: "Speech to text.".into(),
            endpoint: None,
            model_id: String::new(),
            auth_env: None,
            timeout: Duration::from_secs(5),
            max_retries: 2,
            multi_audio: true,
            script: None,
        };
        let script = MockScript::parse("[[responses]]\ntool = \"whisper\"\ntext = \"hello world\"\n").unwrap();
        ToolRegistry::with_mocks(vec![spec], [("whisper".to_string(), script)]).unwrap()
    }

    fn whisper_call() -> String {
        render_tool_call(&ToolCallRequest::new("whisper", ["/a.wav"], "Transcribe this audio."))
    }

    /// Records every message list it is sent and replays a fixed script.
    struct Recording {
        replies: Vec<String>,
        seen: Mutex<Vec<Vec<Turn>>>,
    }

    #[async_trait]
    impl AgentBackend for Recording {
        async fn complete(&self, turns: &[Turn], _: u64, _: &SamplingConfig) -> Result<String, BackendError> {
            let mut seen = self.seen.lock().unwrap();
            let i = seen.len();
            seen.push(turns.to_vec());
            Ok(self
                .replies
                .get(i)
                .cloned()
                .unwrap_or_else(|| self.replies.last().unwrap().clone()))
        }
    }

    #[tokio::test]
    async fn two_step_answer() {
        let backend = ScriptedBackend::from_rows([
            ScriptRow {
                user: "*".into(),
                turn: Some(1),
                seed: None,
                last: None,
                text: format!("I will transcribe. {}", whisper_call()),
            },
            ScriptRow {
                user: "*".into(),
                turn: Some(2),
                seed: None,
                last: Some("*hello world*".into()),
                text: "<answer>(a)</answer>".into(),
            },
        ]);
        let trace = run_session(&task(), &backend, &whisper_registry(), &SessionOptions::default()).await;
        assert_eq!(trace.outcome, SessionOutcome::Answered);
        assert_eq!(trace.tool_call_count, 1);
        assert_eq!(answer_of(&trace), Some("(a)"));
        let roles: Vec<Role> = trace.turns.iter().map(|t| t.role).collect();
        assert_eq!(
            roles,
            vec![Role::System, Role::User, Role::Assistant, Role::Tool, Role::Assistant]
        );
    }

    #[tokio::test]
    async fn adversarial_backend_exhausts_budget() {
        for budget in [0, 1, 20] {
            let backend = ScriptedBackend::constant(whisper_call());
            let opts = SessionOptions {
                budget,
                ..SessionOptions::default()
            };
            let trace = run_session(&task(), &backend, &whisper_registry(), &opts).await;
            assert_eq!(trace.outcome, SessionOutcome::BudgetExhausted, "budget {budget}");
            assert_eq!(trace.tool_call_count, budget);
            assert_eq!(trace.turns.iter().filter(|t| t.role == Role::Tool).count(), budget);
            let nudges = trace.turns.iter().filter(|t| t.content == NUDGE_MESSAGE).count();
            assert_eq!(nudges, 1);
            assert_eq!(answer_of(&trace), None);
        }
    }

    #[tokio::test]
    async fn nudge_can_salvage_an_answer() {
        let backend = ScriptedBackend::parse(&format!(
            "[[turns]]\nlast = \"{}\"\ntext = \"<answer>(b)</answer>\"\n[[turns]]\ntext = '{}'\n",
            NUDGE_MESSAGE,
            whisper_call()
        ))
        .unwrap();
        let opts = SessionOptions {
            budget: 3,
            ..SessionOptions::default()
        };
        let trace = run_session(&task(), &backend, &whisper_registry(), &opts).await;
        assert_eq!(trace.outcome, SessionOutcome::Answered);
        assert_eq!(trace.tool_call_count, 3);
        assert_eq!(trace.answer.as_deref(), Some("(b)"));
    }

    #[tokio::test]
    async fn many_calls_in_one_turn_are_truncated_at_budget() {
        let five = std::iter::repeat_n(whisper_call(), 5).collect::<String>();
        let backend = ScriptedBackend::constant(five);
        let opts = SessionOptions {
            budget: 7,
            ..SessionOptions::default()
        };
        let trace = run_session(&task(), &backend, &whisper_registry(), &opts).await;
        assert_eq!(trace.tool_call_count, 7);
        assert_eq!(trace.outcome, SessionOutcome::BudgetExhausted);
    }

    #[tokio::test]
    async fn seven_calls_then_answer() {
        let mut replies: Vec<String> = (0..7).map(|_| whisper_call()).collect();
        replies.push("<answer>(a) hello world</answer>".into());
        let backend = Recording {
            replies,
            seen: Mutex::new(Vec::new()),
        };
        let trace = run_session(&task(), &backend, &whisper_registry(), &SessionOptions::default()).await;
        assert_eq!(trace.outcome, SessionOutcome::Answered);
        assert_eq!(trace.tool_call_count, 7);

        // history only ever grows
        let seen = backend.seen.lock().unwrap();
        for pair in seen.windows(2) {
            assert!(pair[1].len() > pair[0].len());
            assert_eq!(&pair[1][..pair[0].len()], &pair[0][..]);
        }
    }

    #[tokio::test]
    async fn tool_calls_take_precedence_over_answer() {
        let backend = Recording {
            replies: vec![
                format!("{} <answer>(b)</answer>", whisper_call()),
                "<answer>(a)</answer>".into(),
            ],
            seen: Mutex::new(Vec::new()),
        };
        let trace = run_session(&task(), &backend, &whisper_registry(), &SessionOptions::default()).await;
        assert_eq!(trace.tool_call_count, 1);
        assert_eq!(trace.answer.as_deref(), Some("(a)"));
    }

    #[tokio::test]
    async fn unknown_tool_becomes_tool_message() {
        let bad = render_tool_call(&ToolCallRequest::new("nope", ["/a.wav"], "x"));
        let backend = Recording {
            replies: vec![bad, "<answer>(a)</answer>".into()],
            seen: Mutex::new(Vec::new()),
        };
        let trace = run_session(&task(), &backend, &whisper_registry(), &SessionOptions::default()).await;
        assert_eq!(trace.outcome, SessionOutcome::Answered);
        assert_eq!(trace.tool_call_count, 1);
        let tool = &trace.turns[3];
        assert_eq!(tool.role, Role::Tool);
        assert!(tool.result.is_none());
        assert!(tool.content.contains("unknown tool `nope`"));
        assert!(tool.content.contains("status=\"error\""));
    }

    #[tokio::test]
    async fn idle_turns_end_in_agent_error() {
        let backend = ScriptedBackend::constant("Let me think about it... <tool_call>{oops</tool_call>");
        let trace = run_session(&task(), &backend, &whisper_registry(), &SessionOptions::default()).await;
        assert_eq!(trace.outcome, SessionOutcome::AgentError);
        assert_eq!(
            trace.turns.iter().filter(|t| t.role == Role::Assistant).count(),
            DEFAULT_MAX_IDLE_TURNS
        );
        assert!(trace.turns[3].content.contains("Problem: undecodable"));
    }

    #[tokio::test]
    async fn backend_failure_keeps_partial_trace() {
        let backend = ScriptedBackend::from_rows([ScriptRow {
            user: "*".into(),
            turn: Some(1),
            seed: None,
            last: None,
            text: whisper_call(),
        }]);
        let trace = run_session(&task(), &backend, &whisper_registry(), &SessionOptions::default()).await;
        assert_eq!(trace.outcome, SessionOutcome::AgentError);
        assert_eq!(trace.tool_call_count, 1);
        assert!(trace.error.as_deref().unwrap().contains("no response for turn 2"));
        assert_eq!(answer_of(&trace), None);
    }

    #[tokio::test]
    async fn invalid_task_is_agent_error() {
        let mut t = task();
        t.audio_refs.clear();
        let trace = run_session(
            &t,
            &ScriptedBackend::constant("x"),
            &whisper_registry(),
            &SessionOptions::default(),
        )
        .await;
        assert_eq!(trace.outcome, SessionOutcome::AgentError);
        assert!(trace.turns.is_empty());
    }

    #[test]
    fn task_validation() {
        let mut t = task();
        assert!(t.validate().is_ok());
        assert_eq!(t.gold_index(), Some(0));
        t.gold = Some("rain".into());
        assert!(matches!(t.validate(), Err(TaskError::GoldNotAChoice(_))));
        t.choices = Some(vec!["rain".into()]);
        assert_eq!(t.validate(), Err(TaskError::TooFewChoices(1)));
        t.choices = None;
        assert!(t.validate().is_ok());
    }

    struct Collect(Mutex<Vec<AgentEvent>>);

    impl SessionObserver for Collect {
        fn on_event(&self, event: AgentEvent) {
            self.0.lock().unwrap().push(event);
        }
    }

    #[tokio::test]
    async fn observer_sees_events_in_order() {
        let backend = Recording {
            replies: vec![whisper_call(), "<answer>(a)</answer>".into()],
            seen: Mutex::new(Vec::new()),
        };
        let events = Collect(Mutex::new(Vec::new()));
        run_session_observed(
            &task(),
            &backend,
            &whisper_registry(),
            &SessionOptions::default(),
            &events,
        )
        .await;
        let kinds: Vec<&'static str> = events
            .0
            .lock()
            .unwrap()
            .iter()
            .map(|e| match e {
                AgentEvent::SessionStarted { .. } => "started",
                AgentEvent::AssistantText { .. } => "text",
                AgentEvent::ToolCallStarted { .. } => "call",
                AgentEvent::ToolResult { .. } => "result",
                AgentEvent::Answer { .. } => "answer",
                AgentEvent::SessionEnded { .. } => "ended",
            })
            .collect();
        assert_eq!(
            kinds,
            vec!["started", "text", "call", "result", "text", "answer", "ended"]
        );
    }
}
