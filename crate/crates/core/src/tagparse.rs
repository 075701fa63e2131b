//! Structured-tag protocol between the agent model and the framework.
//!
//! The agent requests a tool by emitting
//!
//! ```text
//! <tool_call>{"tool": "whisper", "audio": "/data/a.wav", "prompt": "Transcribe this audio."}</tool_call>
//! ```
//!
//! and commits to a final answer with `<answer>...</answer>`. The tag body is a
//! flat JSON object with keys `tool`, `audio` (a string or a list of strings)
//! and `prompt`. Parsing is total: malformed fragments become [`Diagnostic`]s,
//! never errors.
//!
//! Offsets in [`Span`] and [`Diagnostic`] are UTF-8 byte offsets into the
//! parsed text.

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const TOOL_CALL_OPEN: &str = "<tool_call>";
pub const TOOL_CALL_CLOSE: &str = "</tool_call>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

/// A single tool invocation requested by the agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCallRequest {
    pub tool_name: String,
    pub audio_refs: Vec<String>,
    pub prompt: String,
}

impl ToolCallRequest {
    pub fn new(
        tool_name: impl Into<String>,
        audio_refs: impl IntoIterator<Item = impl Into<String>>,
        prompt: impl Into<String>,
    ) -> Self {
        Self {
            tool_name: tool_name.into(),
            audio_refs: audio_refs.into_iter().map(Into::into).collect(),
            prompt: prompt.into(),
        }
    }

    /// `true` when the request can be rendered and round-tripped.
    pub fn is_valid(&self) -> bool {
        !self.tool_name.is_empty() && !self.prompt.is_empty()
    }
}

/// Half-open byte range `[start, end)` covering one complete tag pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

/// A decoded tool call together with where it sits in the source text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocatedCall {
    pub request: ToolCallRequest,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiagnosticKind {
    /// An opening tag with no matching close before the next opening tag of the same kind.
    UnclosedTag {
        tag: String,
    },
    /// The body of a `<tool_call>` is not a JSON object.
    UndecodableBody {
        reason: String,
    },
    MissingKey {
        key: String,
    },
    InvalidValue {
        key: String,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub offset: usize,
    #[serde(flatten)]
    pub kind: DiagnosticKind,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.kind {
            DiagnosticKind::UnclosedTag { tag } => {
                write!(f, "unclosed {tag} at byte {}", self.offset)
            }
            DiagnosticKind::UndecodableBody { reason } => {
                write!(f, "undecodable tool_call body at byte {}: {reason}", self.offset)
            }
            DiagnosticKind::MissingKey { key } => {
                write!(f, "tool_call at byte {} is missing required key `{key}`", self.offset)
            }
            DiagnosticKind::InvalidValue { key, reason } => {
                write!(f, "tool_call at byte {} has invalid `{key}`: {reason}", self.offset)
            }
        }
    }
}

/// Everything extracted from one assistant message.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedTurn {
    pub tool_calls: Vec<LocatedCall>,
    /// Content of the last well-formed `<answer>` pair, trimmed.
    pub answer: Option<String>,
    /// Source text with every well-formed tag pair removed.
    pub free_text: String,
    pub diagnostics: Vec<Diagnostic>,
}

impl ParsedTurn {
    pub fn requests(&self) -> impl Iterator<Item = &ToolCallRequest> {
        self.tool_calls.iter().map(|c| &c.request)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Tag {
    ToolCall,
    Answer,
}

impl Tag {
    fn open(self) -> &'static str {
        match self {
            Tag::ToolCall => TOOL_CALL_OPEN,
            Tag::Answer => ANSWER_OPEN,
        }
    }

    fn close(self) -> &'static str {
        match self {
            Tag::ToolCall => TOOL_CALL_CLOSE,
            Tag::Answer => ANSWER_CLOSE,
        }
    }
}

fn next_open(text: &str, from: usize) -> Option<(usize, Tag)> {
    let rest = &text[from..];
    let call = rest.find(TOOL_CALL_OPEN).map(|i| (from + i, Tag::ToolCall));
    let answer = rest.find(ANSWER_OPEN).map(|i| (from + i, Tag::Answer));
    match (call, answer) {
        (Some(c), Some(a)) => Some(if c.0 <= a.0 { c } else { a }),
        (c, a) => c.or(a),
    }
}

/// Parse one model message. Never fails.
pub fn parse_turn(text: &str) -> ParsedTurn {
    let mut out = ParsedTurn::default();
    let mut removed: Vec<Span> = Vec::new();
    let mut pos = 0;

    while let Some((open_at, tag)) = next_open(text, pos) {
        let body_start = open_at + tag.open().len();
        let close_at = text[body_start..].find(tag.close()).map(|i| body_start + i);
        // The same tag opening again before the close means this one was never closed.
        let reopened = text[body_start..].find(tag.open()).map(|i| body_start + i);
        let close_at = match (close_at, reopened) {
            (Some(c), Some(r)) if r < c => None,
            (c, _) => c,
        };
        let Some(close_at) = close_at else {
            out.diagnostics.push(Diagnostic {
                offset: open_at,
                kind: DiagnosticKind::UnclosedTag {
                    tag: tag.open().to_string(),
                },
            });
            pos = body_start;
            continue;
        };
        let end = close_at + tag.close().len();
        let body = &text[body_start..close_at];
        let span = Span { start: open_at, end };
        match tag {
            Tag::ToolCall => match decode_body(body) {
                Ok(request) => {
                    out.tool_calls.push(LocatedCall { request, span });
                    removed.push(span);
                }
                Err(kind) => out.diagnostics.push(Diagnostic { offset: open_at, kind }),
            },
            Tag::Answer => {
                out.answer = Some(body.trim().to_string());
                removed.push(span);
            }
        }
        pos = end;
    }

    let mut free = String::with_capacity(text.len());
    let mut cursor = 0;
    for span in &removed {
        free.push_str(&text[cursor..span.start]);
        cursor = span.end;
    }
    free.push_str(&text[cursor..]);
    out.free_text = free.trim().to_string();
    out
}

fn decode_body(body: &str) -> Result<ToolCallRequest, DiagnosticKind> {
    let value: Value =
        serde_json::from_str(body.trim()).map_err(|e| DiagnosticKind::UndecodableBody { reason: e.to_string() })?;
    let Value::Object(map) = value else {
        return Err(DiagnosticKind::UndecodableBody {
            reason: "body is not a JSON object".into(),
        });
    };

    let string_field = |key: &str| -> Result<String, DiagnosticKind> {
        match map.get(key) {
            None | Some(Value::Null) => Err(DiagnosticKind::MissingKey { key: key.into() }),
            Some(Value::String(s)) if !s.is_empty() => Ok(s.clone()),
            Some(Value::String(_)) => Err(DiagnosticKind::InvalidValue {
                key: key.into(),
                reason: "empty string".into(),
            }),
            Some(_) => Err(DiagnosticKind::InvalidValue {
                key: key.into(),
                reason: "expected a string".into(),
            }),
        }
    };

    let tool_name = string_field("tool")?;
    let prompt = string_field("prompt")?;
    let audio_refs = match map.get("audio") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::String(s)) => vec![s.clone()],
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| match v {
                Value::String(s) => Ok(s.clone()),
                _ => Err(DiagnosticKind::InvalidValue {
                    key: "audio".into(),
                    reason: "list entries must be strings".into(),
                }),
            })
            .collect::<Result<_, _>>()?,
        Some(_) => {
            return Err(DiagnosticKind::InvalidValue {
                key: "audio".into(),
                reason: "expected a string or a list of strings".into(),
            })
        }
    };

    Ok(ToolCallRequest {
        tool_name,
        audio_refs,
        prompt,
    })
}

/// Canonical rendering of a tool call.
///
/// A single audio reference is written as a string, several as a list. Every
/// `<` inside the JSON body is written as the escape `\u003c`, so no string
/// value can open or close a tag.
pub fn render_tool_call(req: &ToolCallRequest) -> String {
    let audio = match req.audio_refs.as_slice() {
        [one] => Value::String(one.clone()),
        many => Value::Array(many.iter().cloned().map(Value::String).collect()),
    };
    let mut body = serde_json::Map::new();
    body.insert("tool".into(), Value::String(req.tool_name.clone()));
    body.insert("audio".into(), audio);
    body.insert("prompt".into(), Value::String(req.prompt.clone()));
    let json = Value::Object(body).to_string().replace('<', "\\u003c");
    format!("{TOOL_CALL_OPEN}{json}{TOOL_CALL_CLOSE}")
}

pub fn render_answer(answer: &str) -> String {
    format!("{ANSWER_OPEN}{answer}{ANSWER_CLOSE}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent reference scanner: counts balanced tag pairs with plain
    /// string searches, treating any re-opening before a close as unclosed.
    fn reference_pairs(text: &str, open: &str, close: &str) -> (usize, usize) {
        let mut pairs = 0;
        let mut unclosed = 0;
        let mut rest = text;
        while let Some(i) = rest.find(open) {
            let after = &rest[i + open.len()..];
            match (after.find(close), after.find(open)) {
                (Some(c), Some(o)) if o < c => {
                    unclosed += 1;
                    rest = after;
                }
                (Some(c), _) => {
                    pairs += 1;
                    rest = &after[c + close.len()..];
                }
                (None, _) => {
                    unclosed += 1;
                    rest = after;
                }
            }
        }
        (pairs, unclosed)
    }

    #[test]
    fn single_tool_call_after_reasoning() {
        let text = "I will ask the ASR tool. <tool_call>{\"tool\":\"whisper\",\"audio\":\"/a.wav\",\"prompt\":\"Transcribe this audio.\"}</tool_call>";
        let parsed = parse_turn(text);
        assert_eq!(parsed.tool_calls.len(), 1);
        assert_eq!(
            parsed.tool_calls[0].request,
            ToolCallRequest::new("whisper", ["/a.wav"], "Transcribe this audio.")
        );
        assert_eq!(parsed.answer, None);
        assert_eq!(parsed.free_text, "I will ask the ASR tool.");
        let span = parsed.tool_calls[0].span;
        assert_eq!(&text[span.start..span.start + 11], "<tool_call>");
        assert_eq!(span.end, text.len());
    }

    #[test]
    fn answer_only() {
        let parsed = parse_turn("<answer>(b) rain</answer>");
        assert!(parsed.tool_calls.is_empty());
        assert_eq!(parsed.answer.as_deref(), Some("(b) rain"));
        assert!(parsed.diagnostics.is_empty());
    }

    #[test]
    fn two_pairs_and_an_unclosed_fragment() {
        let text = concat!(
            "first <tool_call>{\"tool\":\"a\",\"audio\":\"x.wav\",\"prompt\":\"p1\"}</tool_call>",
            " then <tool_call>{\"tool\":\"b\",\"audio\":[\"x.wav\",\"y.wav\"],\"prompt\":\"p2\"}</tool_call>",
            " and finally <tool_call>{\"tool\":\"c\", \"prompt\":"
        );
        let (pairs, unclosed) = reference_pairs(text, TOOL_CALL_OPEN, TOOL_CALL_CLOSE);
        let parsed = parse_turn(text);
        assert_eq!(parsed.tool_calls.len(), pairs);
        assert_eq!(parsed.diagnostics.len(), unclosed);
        assert_eq!(pairs, 2);
        assert_eq!(unclosed, 1);
        assert_eq!(parsed.tool_calls[0].request.tool_name, "a");
        assert_eq!(parsed.tool_calls[1].request.tool_name, "b");
        assert_eq!(parsed.tool_calls[1].request.audio_refs, vec!["x.wav", "y.wav"]);
        assert!(matches!(parsed.diagnostics[0].kind, DiagnosticKind::UnclosedTag { .. }));
    }

    #[test]
    fn unclosed_fragment_before_good_pair() {
        let text = "<tool_call>{\"tool\":\"a\" <tool_call>{\"tool\":\"b\",\"prompt\":\"p\"}</tool_call>";
        let parsed = parse_turn(text);
        assert_eq!(parsed.tool_calls.len(), 1);
        assert_eq!(parsed.tool_calls[0].request.tool_name, "b");
        assert_eq!(parsed.diagnostics.len(), 1);
        assert_eq!(parsed.diagnostics[0].offset, 0);
    }

    #[test]
    fn malformed_bodies_are_diagnosed() {
        let text = concat!(
            "<tool_call>not json</tool_call>",
            "<tool_call>[1,2]</tool_call>",
            "<tool_call>{\"audio\":\"a.wav\",\"prompt\":\"p\"}</tool_call>",
            "<tool_call>{\"tool\":\"t\",\"audio\":3,\"prompt\":\"p\"}</tool_call>",
            "<tool_call>{\"tool\":\"t\",\"prompt\":\"\"}</tool_call>",
        );
        let parsed = parse_turn(text);
        assert!(parsed.tool_calls.is_empty());
        let kinds: Vec<_> = parsed.diagnostics.iter().map(|d| &d.kind).collect();
        assert!(matches!(kinds[0], DiagnosticKind::UndecodableBody { .. }));
        assert!(matches!(kinds[1], DiagnosticKind::UndecodableBody { .. }));
        assert_eq!(kinds[2], &DiagnosticKind::MissingKey { key: "tool".into() });
        assert!(matches!(kinds[3], DiagnosticKind::InvalidValue { key, .. } if key == "audio"));
        assert!(matches!(kinds[4], DiagnosticKind::InvalidValue { key, .. } if key == "prompt"));
        // malformed pairs stay in the free text
        assert_eq!(parsed.free_text, text);
    }

    #[test]
    fn last_answer_wins() {
        let one = parse_turn("<answer>(a)</answer> hmm, actually");
        assert_eq!(one.answer.as_deref(), Some("(a)"));
        let two = parse_turn("<answer>(a)</answer> hmm, actually <answer>(c) wind</answer>");
        assert_eq!(two.answer.as_deref(), Some("(c) wind"));
        assert_eq!(two.free_text, "hmm, actually");
    }

    #[test]
    fn answer_inside_tool_prompt_is_not_an_answer() {
        let req = ToolCallRequest::new("t", ["a.wav"], "Reply with <answer>x</answer> please");
        let parsed = parse_turn(&render_tool_call(&req));
        assert_eq!(parsed.answer, None);
        assert_eq!(parsed.tool_calls[0].request, req);
    }

    #[test]
    fn tool_call_and_answer_in_one_turn_are_both_reported() {
        let text = format!(
            "{} <answer>(a)</answer>",
            render_tool_call(&ToolCallRequest::new("t", ["a.wav"], "p"))
        );
        let parsed = parse_turn(&text);
        assert_eq!(parsed.tool_calls.len(), 1);
        assert_eq!(parsed.answer.as_deref(), Some("(a)"));
    }

    #[test]
    fn render_round_trips_single_and_multi_audio() {
        let single = ToolCallRequest::new("qwen_omni", ["/x.wav"], "What is the mood?");
        let rendered = render_tool_call(&single);
        assert!(rendered.contains("\"audio\":\"/x.wav\""));
        assert_eq!(parse_turn(&rendered).tool_calls[0].request, single);

        let multi = ToolCallRequest::new("qwen_omni", ["/x.wav", "/y.wav"], "Compare these.");
        let rendered = render_tool_call(&multi);
        assert!(rendered.contains("\"audio\":[\"/x.wav\",\"/y.wav\"]"));
        assert_eq!(parse_turn(&rendered).tool_calls[0].request, multi);
    }

    #[test]
    fn closing_tag_in_prompt_is_escaped() {
        let req = ToolCallRequest::new("t", ["a.wav"], "say </tool_call> out loud");
        let rendered = render_tool_call(&req);
        assert_eq!(rendered.matches(TOOL_CALL_CLOSE).count(), 1);
        let parsed = parse_turn(&rendered);
        assert_eq!(parsed.tool_calls.len(), 1);
        assert_eq!(parsed.tool_calls[0].request, req);
    }

    fn arb_request() -> impl Strategy<Value = ToolCallRequest> {
        (
            "[a-z0-9_]{1,12}",
            proptest::collection::vec(any::<String>(), 0..4),
            any::<String>().prop_filter("non-empty", |s| !s.is_empty()),
        )
            .prop_map(|(tool_name, audio_refs, prompt)| ToolCallRequest {
                tool_name,
                audio_refs,
                prompt,
            })
    }

    proptest! {
        #[test]
        fn round_trip(req in arb_request()) {
            let parsed = parse_turn(&render_tool_call(&req));
            prop_assert_eq!(parsed.tool_calls.len(), 1);
            prop_assert_eq!(&parsed.tool_calls[0].request, &req);
            prop_assert!(parsed.diagnostics.is_empty());
        }

        #[test]
        fn round_trip_with_tag_noise_in_prompt(
            prefix in any::<String>(),
            suffix in any::<String>(),
        ) {
            let prompt = format!("{prefix}</tool_call><tool_call></answer>{suffix}");
            let req = ToolCallRequest::new("t", ["a.wav"], prompt);
            let parsed = parse_turn(&render_tool_call(&req));
            prop_assert_eq!(&parsed.tool_calls[0].request, &req);
        }

        #[test]
        fn total_on_arbitrary_text(text in any::<String>()) {
            let _ = parse_turn(&text);
        }

        #[test]
        fn total_on_tag_heavy_text(
            pieces in proptest::collection::vec(
                prop_oneof![
                    Just("<tool_call>".to_string()),
                    Just("</tool_call>".to_string()),
                    Just("<answer>".to_string()),
                    Just("</answer>".to_string()),
                    Just("{\"tool\":\"t\",\"prompt\":\"p\"}".to_string()),
                    any::<String>(),
                ],
                0..20,
            )
        ) {
            let text: String = pieces.concat();
            let parsed = parse_turn(&text);
            // spans ordered and disjoint
            for pair in parsed.tool_calls.windows(2) {
                prop_assert!(pair[0].span.end <= pair[1].span.start);
            }
            for call in &parsed.tool_calls {
                prop_assert!(call.span.start < call.span.end);
                prop_assert!(text[call.span.start..].starts_with(TOOL_CALL_OPEN));
                prop_assert!(text[..call.span.end].ends_with(TOOL_CALL_CLOSE));
            }
        }
    }
}
