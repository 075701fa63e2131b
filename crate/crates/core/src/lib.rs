//! Audio question answering through a text-only reasoning agent that
//! delegates listening to audio-language tools.
//!
//! | module | contents |
//! |--------|----------|
//! | [`tagparse`] | `<tool_call>` / `<answer>` tag protocol |
//! | [`adapters`] | tool registry, HTTP and mock tool adapters, refusal retry |
//! | [`config`] | TOML configuration shared by all commands |
//! | [`agent`] | system prompt, agent backends, the session loop |
//! | [`bench`] | datasets, answer matching, multi-seed benchmark runs, reports |
//! | [`shapley`] | Monte Carlo Shapley attribution of tools |
//! | [`serve`] | HTTP/SSE session server |
//! | [`cli`] | command implementations behind the `audiotoolagent` binary |

pub mod adapters;
pub mod agent;
pub mod bench;
pub mod cli;
pub mod config;
pub(crate) mod sampling;
pub mod serve;
pub mod shapley;
pub mod tagparse;

pub use adapters::{detect_refusal, load_registry, ToolRegistry, ToolResult, ToolSpec};
pub use agent::{run_session, AgentBackend, AudioTask, SessionOutcome, SessionTrace};
pub use tagparse::{parse_turn, render_tool_call, ParsedTurn, ToolCallRequest};

/// Serialize a `Duration` as fractional seconds.
pub(crate) mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}
