//! Wire formats for HTTP tool endpoints.
//!
//! * `chat_audio`: `POST {endpoint}/chat/completions`, one user message with a
//!   text part and one `input_audio` part (base64 + format) per file; the reply
//!   is `choices[0].message.content`.
//! * `transcription`: `POST {endpoint}/audio/transcriptions`, multipart with
//!   `file` and `model`; the reply is the `text` field.
//! * `web_search`: `POST {endpoint}/search` with `{"query", "max_results"}`;
//!   the reply's `results[].content` (or `snippet`) are concatenated.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{AttemptError, AudioPayload, FailureKind, ToolFailure, ToolSpec};

const SEARCH_RESULTS: usize = 5;

fn endpoint(spec: &ToolSpec) -> &str {
    spec.endpoint.as_deref().unwrap_or_default()
}

fn transport(err: reqwest::Error) -> AttemptError {
    AttemptError::Retryable(ToolFailure {
        kind: FailureKind::Transport,
        message: err.to_string(),
    })
}

async fn read_json(resp: reqwest::Response) -> Result<Value, AttemptError> {
    let status = resp.status();
    if !status.is_success() {
        let body = resp.text().await.unwrap_or_default();
        let failure = ToolFailure {
            kind: if is_retryable(status) {
                FailureKind::Transport
            } else {
                FailureKind::Rejected
            },
            message: format!("HTTP {status}: {}", truncate(&body, 300)),
        };
        return Err(if is_retryable(status) {
            AttemptError::Retryable(failure)
        } else {
            AttemptError::Fatal(failure)
        });
    }
    resp.json::<Value>().await.map_err(transport)
}

fn is_retryable(status: StatusCode) -> bool {
    status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS || status == StatusCode::REQUEST_TIMEOUT
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn malformed(what: &str) -> AttemptError {
    AttemptError::Retryable(ToolFailure {
        kind: FailureKind::Transport,
        message: format!("malformed response: missing {what}"),
    })
}

/// Extract the assistant text from a chat-completions response body.
pub(crate) fn first_choice_text(body: &Value) -> Option<String> {
    let content = body.pointer("/choices/0/message/content")?;
    match content {
        Value::String(s) => Some(s.clone()),
        // some servers return content parts
        Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join(""),
        ),
        _ => None,
    }
}

pub(crate) fn chat_audio_body(model_id: &str, prompt: &str, audio: &[AudioPayload]) -> Value {
    let mut parts = vec![json!({ "type": "text", "text": prompt })];
    parts.extend(audio.iter().map(|a| {
        json!({
            "type": "input_audio",
            "input_audio": { "data": BASE64.encode(&a.bytes), "format": a.format },
        })
    }));
    json!({
        "model": model_id,
        "messages": [{ "role": "user", "content": parts }],
    })
}

pub(crate) async fn chat_audio(
    client: &reqwest::Client,
    spec: &ToolSpec,
    prompt: &str,
    audio: &[AudioPayload],
    credential: Option<&str>,
) -> Result<String, AttemptError> {
    let mut req = client
        .post(format!("{}/chat/completions", endpoint(spec)))
        .json(&chat_audio_body(&spec.model_id, prompt, audio));
    if let Some(key) = credential {
        req = req.bearer_auth(key);
    }
    let body = read_json(req.send().await.map_err(transport)?).await?;
    first_choice_text(&body).ok_or_else(|| malformed("choices[0].message.content"))
}

pub(crate) async fn transcription(
    client: &reqwest::Client,
    spec: &ToolSpec,
    audio: &AudioPayload,
    credential: Option<&str>,
) -> Result<String, AttemptError> {
    let file = reqwest::multipart::Part::bytes(audio.bytes.clone()).file_name(audio.file_name.clone());
    let form = reqwest::multipart::Form::new()
        .part("file", file)
        .text("model", spec.model_id.clone());
    let mut req = client
        .post(format!("{}/audio/transcriptions", endpoint(spec)))
        .multipart(form);
    if let Some(key) = credential {
        req = req.bearer_auth(key);
    }
    let body = read_json(req.send().await.map_err(transport)?).await?;
    body.get("text")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| malformed("text"))
}

pub(crate) async fn web_search(
    client: &reqwest::Client,
    spec: &ToolSpec,
    query: &str,
    credential: Option<&str>,
) -> Result<String, AttemptError> {
    let mut req = client
        .post(format!("{}/search", endpoint(spec)))
        .json(&json!({ "query": query, "max_results": SEARCH_RESULTS }));
    if let Some(key) = credential {
        req = req.bearer_auth(key);
    }
    let body = read_json(req.send().await.map_err(transport)?).await?;
    let results = body
        .get("results")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("results"))?;
    let snippets: Vec<String> = results
        .iter()
        .filter_map(|r| {
            let text = r.get("content").or_else(|| r.get("snippet")).and_then(Value::as_str)?;
            Some(match r.get("title").and_then(Value::as_str) {
                Some(title) => format!("{title}: {text}"),
                None => text.to_string(),
            })
        })
        .collect();
    if snippets.is_empty() {
        Ok("No search results.".to_string())
    } else {
        Ok(snippets.join("\n"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chat_body_has_text_then_audio_parts() {
        let audio = vec![
            AudioPayload {
                file_name: "a.wav".into(),
                format: "wav".into(),
                bytes: b"RIFF".to_vec(),
            },
            AudioPayload {
                file_name: "b.mp3".into(),
                format: "mp3".into(),
                bytes: vec![0, 1, 2],
            },
        ];
        let body = chat_audio_body("qwen", "Describe.", &audio);
        assert_eq!(body["model"], "qwen");
        let parts = body["messages"][0]["content"].as_array().unwrap();
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[0], json!({"type": "text", "text": "Describe."}));
        assert_eq!(parts[1]["input_audio"]["data"], "UklGRg==");
        assert_eq!(parts[2]["input_audio"]["format"], "mp3");
    }

    #[test]
    fn choice_text_variants() {
        let plain = json!({"choices": [{"message": {"content": "hi"}}]});
        assert_eq!(first_choice_text(&plain).as_deref(), Some("hi"));
        let parts = json!({"choices": [{"message": {"content": [{"type": "text", "text": "a"}, {"type": "text", "text": "b"}]}}]});
        assert_eq!(first_choice_text(&parts).as_deref(), Some("ab"));
        assert_eq!(first_choice_text(&json!({"choices": []})), None);
    }
}
