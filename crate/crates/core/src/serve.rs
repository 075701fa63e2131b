//! HTTP server streaming live session traces as server-sent events.
//!
//! | route | |
//! |-------|-|
//! | `POST /sessions` | JSON `{"audio", "question", "choices"?, "seed"?}` or a multipart form with `audio` file parts and `question`, `choices` (repeated), `seed` fields; returns `{"session_id"}` |
//! | `GET /sessions/{id}/events` | SSE stream of [`SessionEvent`]s, closed after `session_ended`; honours `Last-Event-ID` |
//! | `GET /tools` | the registry listing |
//! | anything else | files from the static directory, when configured |
//!
//! Every session's events stay in memory while it runs. Once finished, the
//! `retention` most recent sessions stay replayable and older ones are
//! dropped.

use std::collections::{HashMap, VecDeque};
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::watch;
use tower_http::services::ServeDir;
use tracing::{info, warn};

use crate::agent::{run_session_observed, AgentEvent, AgentSetup, AudioTask, SessionObserver};
use crate::bench::AudioField;

pub const DEFAULT_RETENTION: usize = 64;
const UPLOAD_LIMIT_BYTES: usize = 64 * 1024 * 1024;

/// One streamed record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub session_id: String,
    /// Starts at 1 and increases by one per event.
    pub sequence: u64,
    pub event_kind: String,
    pub payload: Value,
}

impl SessionEvent {
    fn new(session_id: &str, sequence: u64, event: &AgentEvent) -> Self {
        let mut value = serde_json::to_value(event).expect("serializable");
        let kind = value
            .as_object_mut()
            .and_then(|o| o.remove("event"))
            .and_then(|k| k.as_str().map(str::to_string))
            .unwrap_or_default();
        Self {
            session_id: session_id.to_string(),
            sequence,
            event_kind: kind,
            payload: value,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub static_dir: Option<PathBuf>,
    pub retention: usize,
    /// Where uploaded audio is written.
    pub upload_dir: PathBuf,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            static_dir: None,
            retention: DEFAULT_RETENTION,
            upload_dir: std::env::temp_dir().join("audiotoolagent-uploads"),
        }
    }
}

struct SessionLog {
    id: String,
    events: Mutex<Vec<SessionEvent>>,
    len: watch::Sender<usize>,
}

impl SessionLog {
    fn new(id: String) -> Self {
        Self {
            id,
            events: Mutex::new(Vec::new()),
            len: watch::channel(0).0,
        }
    }

    fn ended(&self) -> bool {
        self.events
            .lock()
            .unwrap()
            .last()
            .is_some_and(|e| e.event_kind == "session_ended")
    }

    fn get(&self, index: usize) -> Option<SessionEvent> {
        self.events.lock().unwrap().get(index).cloned()
    }
}

impl SessionObserver for SessionLog {
    fn on_event(&self, event: AgentEvent) {
        let mut events = self.events.lock().unwrap();
        let seq = events.len() as u64 + 1;
        events.push(SessionEvent::new(&self.id, seq, &event));
        self.len.send_replace(events.len());
    }
}

pub struct ServerState {
    setup: AgentSetup,
    options: ServeOptions,
    sessions: Mutex<HashMap<String, Arc<SessionLog>>>,
    finished: Mutex<VecDeque<String>>,
}

impl ServerState {
    pub fn new(setup: AgentSetup, options: ServeOptions) -> Arc<Self> {
        Arc::new(Self {
            setup,
            options,
            sessions: Mutex::new(HashMap::new()),
            finished: Mutex::new(VecDeque::new()),
        })
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    fn finish(&self, id: &str) {
        let mut finished = self.finished.lock().unwrap();
        finished.push_back(id.to_string());
        while finished.len() > self.options.retention {
            if let Some(old) = finished.pop_front() {
                self.sessions.lock().unwrap().remove(&old);
            }
        }
    }
}

pub fn router(state: Arc<ServerState>) -> Router {
    let static_dir = state.options.static_dir.clone();
    let app = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/events", get(session_events))
        .route("/tools", get(list_tools))
        .layer(DefaultBodyLimit::max(UPLOAD_LIMIT_BYTES))
        .with_state(state);
    match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

/// Bind and serve until the process is stopped.
pub async fn serve(setup: AgentSetup, bind: &str, options: ServeOptions) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(ServerState::new(setup, options))).await
}

fn bad_request(message: impl Into<String>) -> Response {
    (StatusCode::BAD_REQUEST, Json(json!({ "error": message.into() }))).into_response()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewSession {
    audio: AudioField,
    question: String,
    choices: Option<Vec<String>>,
    seed: Option<u64>,
}

async fn read_multipart(state: &ServerState, mut form: Multipart) -> Result<NewSession, Response> {
    let mut audio = Vec::new();
    let mut question = None;
    let mut choices = Vec::new();
    let mut seed = None;
    while let Some(field) = form.next_field().await.map_err(|e| bad_request(e.body_text()))? {
        let name = field.name().unwrap_or_default().to_string();
        match name.as_str() {
            "audio" => {
                let original = field.file_name().unwrap_or("upload.wav").to_string();
                let safe: String = original
                    .chars()
                    .map(|c| {
                        if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                            c
                        } else {
                            '_'
                        }
                    })
                    .collect();
                let bytes = field.bytes().await.map_err(|e| bad_request(e.body_text()))?;
                let dir = &state.options.upload_dir;
                let path = dir.join(format!("{}-{safe}", uuid::Uuid::new_v4()));
                let stored = async {
                    tokio::fs::create_dir_all(dir).await?;
                    tokio::fs::write(&path, &bytes).await
                };
                stored.await.map_err(|e| {
                    warn!("failed to store upload: {e}");
                    (StatusCode::INTERNAL_SERVER_ERROR, "failed to store upload").into_response()
                })?;
                audio.push(path.to_string_lossy().into_owned());
            }
            "question" => question = Some(field.text().await.map_err(|e| bad_request(e.body_text()))?),
            "choices" | "choice" => choices.push(field.text().await.map_err(|e| bad_request(e.body_text()))?),
            "seed" => {
                let text = field.text().await.map_err(|e| bad_request(e.body_text()))?;
                seed = Some(
                    text.trim()
                        .parse()
                        .map_err(|_| bad_request("seed must be an integer"))?,
                );
            }
            other => return Err(bad_request(format!("unexpected form field `{other}`"))),
        }
    }
    Ok(NewSession {
        audio: AudioField::Many(audio),
        question: question.ok_or_else(|| bad_request("missing `question`"))?,
        choices: (!choices.is_empty()).then_some(choices),
        seed,
    })
}

async fn create_session(State(state): State<Arc<ServerState>>, req: Request) -> Response {
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let body = if is_multipart {
        match Multipart::from_request(req, &()).await {
            Ok(form) => match read_multipart(&state, form).await {
                Ok(b) => b,
                Err(resp) => return resp,
            },
            Err(e) => return bad_request(e.body_text()),
        }
    } else {
        match Json::<NewSession>::from_request(req, &()).await {
            Ok(Json(b)) => b,
            Err(e) => return bad_request(e.body_text()),
        }
    };

    let id = uuid::Uuid::new_v4().to_string();
    let task = AudioTask {
        id: id.clone(),
        audio_refs: body.audio.into_vec(),
        question: body.question,
        choices: body.choices,
        gold: None,
        categories: Vec::new(),
        broken_audio: false,
    };
    if let Err(e) = task.validate() {
        return bad_request(e.to_string());
    }

    let log = Arc::new(SessionLog::new(id.clone()));
    state.sessions.lock().unwrap().insert(id.clone(), log.clone());
    let opts = state.setup.session_options(body.seed.unwrap_or(0));
    let bg = state.clone();
    tokio::spawn(async move {
        let trace = run_session_observed(
            &task,
            bg.setup.backend.as_ref(),
            &bg.setup.registry,
            &opts,
            log.as_ref(),
        )
        .await;
        info!(session = %task.id, outcome = ?trace.outcome, calls = trace.tool_call_count, "session finished");
        bg.finish(&task.id);
    });
    (StatusCode::CREATED, Json(json!({ "session_id": id }))).into_response()
}

struct Cursor {
    log: Arc<SessionLog>,
    next: usize,
    rx: watch::Receiver<usize>,
    done: bool,
}

fn event_stream(cursor: Cursor) -> impl Stream<Item = Result<Event, Infallible>> {
    stream::unfold(cursor, |mut c| async move {
        if c.done {
            return None;
        }
        loop {
            if let Some(ev) = c.log.get(c.next) {
                c.next += 1;
                c.done = ev.event_kind == "session_ended";
                let sse = Event::default()
                    .id(ev.sequence.to_string())
                    .event(ev.event_kind.clone())
                    .json_data(&ev)
                    .expect("serializable");
                return Some((Ok(sse), c));
            }
            if c.log.ended() || c.rx.changed().await.is_err() {
                return None;
            }
        }
    })
}

async fn session_events(State(state): State<Arc<ServerState>>, Path(id): Path<String>, headers: HeaderMap) -> Response {
    let Some(log) = state.sessions.lock().unwrap().get(&id).cloned() else {
        return (
            StatusCode::NOT_FOUND,
            Json(json!({ "error": format!("unknown session `{id}`") })),
        )
            .into_response();
    };
    let resume_after = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    let rx = log.len.subscribe();
    let cursor = Cursor {
        log,
        next: resume_after,
        rx,
        done: false,
    };
    Sse::new(event_stream(cursor))
        .keep_alive(KeepAlive::default())
        .into_response()
}

async fn list_tools(State(state): State<Arc<ServerState>>) -> Json<Value> {
    let tools: Vec<Value> = state
        .setup
        .registry
        .specs()
        .iter()
        .map(|s| {
            json!({
                "name": s.name,
                "kind": s.kind,
                "description": s.description,
                "multi_audio": s.multi_audio,
            })
        })
        .collect();
    Json(json!({ "tools": tools }))
}
