//! C ABI over the `audiotoolagent` core.
//!
//! Every function returns an `int32_t` status (`ATA_OK` or one of the
//! `ATA_ERR_*` codes). On failure the message is available from
//! [`ata_last_error`] on the same thread until the next call. Strings
//! returned through out-parameters are owned by the caller and released with
//! [`ata_string_free`]. Structured results are JSON.
//!
//! Handles (`AtaAgent`, `AtaGame`) are opaque and must be released with their
//! `_free` function. A handle may be shared across threads.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;

use audiotoolagent::agent::{build_system_prompt, run_session, AgentSetup, AudioTask};
use audiotoolagent::bench::match_answer;
use audiotoolagent::shapley::{estimate_shapley, exact_shapley, EstimatorConfig, ShapleyRun, TableGame};
use audiotoolagent::{detect_refusal, parse_turn};

pub const ATA_OK: i32 = 0;
/// A required pointer argument was null.
pub const ATA_ERR_NULL: i32 = 1;
/// A string argument was not valid UTF-8.
pub const ATA_ERR_UTF8: i32 = 2;
/// An argument was malformed or out of range.
pub const ATA_ERR_INVALID: i32 = 3;
/// A file could not be read or parsed.
pub const ATA_ERR_LOAD: i32 = 4;
/// A coalition value could not be computed.
pub const ATA_ERR_EVALUATION: i32 = 5;
/// An internal panic was caught at the boundary.
pub const ATA_ERR_PANIC: i32 = 6;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(i32, String);

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ATA_OK,
        Ok(Err(Failure(code, message))) => {
            set_error(message);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            ATA_ERR_PANIC
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(ATA_ERR_NULL, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(ATA_ERR_UTF8, format!("`{name}`: {e}")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(ATA_ERR_NULL, format!("`{name}` is null")))
}

fn into_c(s: String) -> *mut c_char {
    CString::new(s.replace('\0', "\u{fffd}"))
        .expect("no interior nul")
        .into_raw()
}

fn runtime() -> &'static tokio::runtime::Runtime {
    static RT: OnceLock<tokio::runtime::Runtime> = OnceLock::new();
    RT.get_or_init(|| {
        tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
            .expect("tokio runtime")
    })
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call on this thread; do not free.
#[no_mangle]
pub extern "C" fn ata_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ata_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parse one assistant message into `{"tool_calls", "answer", "free_text", "diagnostics"}`.
///
/// # Safety
/// `text` must be a nul-terminated string; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ata_parse_turn(text: *const c_char, out_json: *mut *mut c_char) -> i32 {
    guard(|| {
        let text = str_arg(text, "text")?;
        let out = out_arg(out_json, "out_json")?;
        *out = into_c(serde_json::to_string(&parse_turn(text)).expect("serializable"));
        Ok(())
    })
}

/// # Safety
/// `text` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ata_detect_refusal(text: *const c_char, out: *mut bool) -> i32 {
    guard(|| {
        let text = str_arg(text, "text")?;
        *out_arg(out, "out")? = detect_refusal(text);
        Ok(())
    })
}

/// Match an extracted answer against a JSON array of choices. `out_choice`
/// receives the resolved choice index or -1.
///
/// # Safety
/// String arguments must be nul-terminated; out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn ata_match_answer(
    extracted: *const c_char,
    choices_json: *const c_char,
    gold: *const c_char,
    out_correct: *mut bool,
    out_choice: *mut i32,
) -> i32 {
    guard(|| {
        let extracted = str_arg(extracted, "extracted")?;
        let gold = str_arg(gold, "gold")?;
        let choices: Vec<String> = serde_json::from_str(str_arg(choices_json, "choices_json")?)
            .map_err(|e| Failure(ATA_ERR_INVALID, format!("choices_json: {e}")))?;
        let correct = out_arg(out_correct, "out_correct")?;
        let choice = out_arg(out_choice, "out_choice")?;
        let m = match_answer(extracted, &choices, gold);
        *correct = m.correct;
        *choice = m.matched_choice.map_or(-1, |i| i as i32);
        Ok(())
    })
}

/// A loaded configuration: tool registry plus agent backend.
pub struct AtaAgent {
    setup: AgentSetup,
}

/// # Safety
/// `config_path` must be nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ata_agent_load(config_path: *const c_char, out: *mut *mut AtaAgent) -> i32 {
    guard(|| {
        let path = str_arg(config_path, "config_path")?;
        let out = out_arg(out, "out")?;
        let setup = AgentSetup::load(path).map_err(|e| Failure(ATA_ERR_LOAD, e.to_string()))?;
        *out = Box::into_raw(Box::new(AtaAgent { setup }));
        Ok(())
    })
}

/// # Safety
/// `agent` must be null or a handle from [`ata_agent_load`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ata_agent_free(agent: *mut AtaAgent) {
    if !agent.is_null() {
        drop(Box::from_raw(agent));
    }
}

/// Number of registered tools.
///
/// # Safety
/// `agent` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ata_agent_tool_count(agent: *const AtaAgent, out: *mut usize) -> i32 {
    guard(|| {
        let agent = agent
            .as_ref()
            .ok_or_else(|| Failure(ATA_ERR_NULL, "`agent` is null".into()))?;
        *out_arg(out, "out")? = agent.setup.registry.len();
        Ok(())
    })
}

/// The system prompt sessions start with.
///
/// # Safety
/// `agent` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ata_agent_system_prompt(agent: *const AtaAgent, out: *mut *mut c_char) -> i32 {
    guard(|| {
        let agent = agent
            .as_ref()
            .ok_or_else(|| Failure(ATA_ERR_NULL, "`agent` is null".into()))?;
        *out_arg(out, "out")? = into_c(build_system_prompt(&agent.setup.registry));
        Ok(())
    })
}

/// Run one session to completion. `task_json` is
/// `{"id", "audio_refs", "question", "choices"?}`; the trace is written as JSON.
///
/// # Safety
/// `agent` must be a live handle; `task_json` nul-terminated; `out_trace_json` writable.
#[no_mangle]
pub unsafe extern "C" fn ata_run_session(
    agent: *const AtaAgent,
    task_json: *const c_char,
    seed: u64,
    out_trace_json: *mut *mut c_char,
) -> i32 {
    guard(|| {
        let agent = agent
            .as_ref()
            .ok_or_else(|| Failure(ATA_ERR_NULL, "`agent` is null".into()))?;
        let task: AudioTask = serde_json::from_str(str_arg(task_json, "task_json")?)
            .map_err(|e| Failure(ATA_ERR_INVALID, format!("task_json: {e}")))?;
        task.validate().map_err(|e| Failure(ATA_ERR_INVALID, e.to_string()))?;
        let out = out_arg(out_trace_json, "out_trace_json")?;
        let setup = &agent.setup;
        let trace = runtime().block_on(run_session(
            &task,
            setup.backend.as_ref(),
            &setup.registry,
            &setup.session_options(seed),
        ));
        *out = into_c(serde_json::to_string(&trace).expect("serializable"));
        Ok(())
    })
}

/// A coalition value table.
pub struct AtaGame {
    game: TableGame,
}

/// Load a game file (`tools = [...]`, `[[values]]` rows, optional `default`).
///
/// # Safety
/// `path` must be nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ata_game_load(path: *const c_char, out: *mut *mut AtaGame) -> i32 {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let game = TableGame::load(path).map_err(|e| Failure(ATA_ERR_LOAD, e.to_string()))?;
        *out = Box::into_raw(Box::new(AtaGame { game }));
        Ok(())
    })
}

/// # Safety
/// `game` must be null or a handle from [`ata_game_load`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ata_game_free(game: *mut AtaGame) {
    if !game.is_null() {
        drop(Box::from_raw(game));
    }
}

fn estimates_json(run: Result<ShapleyRun, audiotoolagent::shapley::ShapleyError>) -> Result<String, Failure> {
    use audiotoolagent::shapley::ShapleyError;
    let run = run.map_err(|e| {
        let code = match e {
            ShapleyError::Evaluation { .. } | ShapleyError::Cache(_) => ATA_ERR_EVALUATION,
            _ => ATA_ERR_INVALID,
        };
        Failure(code, e.to_string())
    })?;
    Ok(serde_json::to_string(&run.estimates).expect("serializable"))
}

/// Exact attribution over all of the game's tools, as a JSON array of
/// `{"tool_name", "value", "std_error", "n_samples"}`.
///
/// # Safety
/// `game` must be a live handle; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn ata_shapley_exact(
    game: *const AtaGame,
    min_predecessor_size: usize,
    out_json: *mut *mut c_char,
) -> i32 {
    guard(|| {
        let game = game
            .as_ref()
            .ok_or_else(|| Failure(ATA_ERR_NULL, "`game` is null".into()))?;
        let out = out_arg(out_json, "out_json")?;
        let g = &game.game;
        let json = estimates_json(runtime().block_on(exact_shapley(&g.tools, g, min_predecessor_size)))?;
        *out = into_c(json);
        Ok(())
    })
}

/// Sampled attribution from `n_permutations` seeded permutations.
///
/// # Safety
/// `game` must be a live handle; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn ata_shapley_estimate(
    game: *const AtaGame,
    n_permutations: usize,
    min_predecessor_size: usize,
    seed: u64,
    out_json: *mut *mut c_char,
) -> i32 {
    guard(|| {
        let game = game
            .as_ref()
            .ok_or_else(|| Failure(ATA_ERR_NULL, "`game` is null".into()))?;
        let out = out_arg(out_json, "out_json")?;
        let g = &game.game;
        let cfg = EstimatorConfig {
            n_permutations,
            min_predecessor_size,
            seed,
            ..EstimatorConfig::default()
        };
        let json = estimates_json(runtime().block_on(estimate_shapley(&g.tools, g, &cfg)))?;
        *out = into_c(json);
        Ok(())
    })
}
