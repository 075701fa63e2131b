use crate::adapters::{ToolKind, ToolRegistry, ToolSpec};
use crate::tagparse::{render_answer, render_tool_call, ToolCallRequest};

use super::AudioTask;

/// Opening instructions of every system prompt.
pub const SYSTEM_PROMPT_HEADER: &str = "You are an expert audio analyst with access to specialized tools. \
Answer the question given. Put the answer between <answer> and </answer> tags. \
If the question is multiple choice, there is always just one choice correct. \
If the tool says it can't listen to audio, try invoking the tool again. \
Use as many different tools as needed to answer the question, even using the same tool multiple times if needed. \
If initial tool outputs are conflicting or ambiguous, do not guess; instead, you must generate specific, \
follow-up tool calls to isolate the point of disagreement and gather more detailed evidence. \
The following tools are available";

pub const NUDGE_MESSAGE: &str = "You have no tool calls remaining. Provide your final answer now.";

pub const EXAMPLE_AUDIO: &str = "/path/to/audio.wav";

/// Marks the start of one tool's documentation block.
pub const TOOL_BLOCK_PREFIX: &str = "### Tool: ";

fn example_call(spec: &ToolSpec) -> ToolCallRequest {
    let (audio, prompt): (Vec<&str>, &str) = match spec.kind {
        ToolKind::Transcription => (vec![EXAMPLE_AUDIO], "Transcribe this audio."),
        ToolKind::WebSearch => (vec![], "history of the theremin"),
        ToolKind::ChatAudio | ToolKind::Mock => (vec![EXAMPLE_AUDIO], "Describe the sounds in this audio."),
    };
    ToolCallRequest::new(spec.name.clone(), audio, prompt)
}

fn tool_block(spec: &ToolSpec) -> String {
    let mut block = format!(
        "{TOOL_BLOCK_PREFIX}{} ({})\n{}\n",
        spec.name, spec.kind, spec.description
    );
    if !spec.multi_audio && spec.kind != ToolKind::WebSearch {
        block.push_str("Accepts exactly one audio file per call.\n");
    }
    block.push_str("Example:\n");
    block.push_str(&render_tool_call(&example_call(spec)));
    block.push('\n');
    block
}

/// Build the agent's system prompt for a registry.
pub fn build_system_prompt(registry: &ToolRegistry) -> String {
    let mut prompt = String::from(SYSTEM_PROMPT_HEADER);
    prompt.push_str(":\n\n");
    if registry.is_empty() {
        prompt.push_str("(no tools are registered; answer from the question alone)\n");
    } else {
        for spec in registry.specs() {
            prompt.push_str(&tool_block(spec));
            prompt.push('\n');
        }
    }
    prompt.push_str(&format!(
        "## Calling tools\n\
To call a tool, write one JSON object between <tool_call> and </tool_call> with the keys \
\"tool\" (the tool name), \"audio\" (one audio file path, or a list of paths) and \"prompt\" \
(your instruction to the tool). You may place several tool calls in one message; they run in order \
and each result comes back in a <tool_result> block. You can make at most a limited number of tool \
calls per question. When you are done, reply with only your final answer, for example {}.\n",
        render_answer("(b) rain")
    ));
    prompt
}

/// The first user message of a session.
pub fn build_user_message(task: &AudioTask) -> String {
    let mut msg = format!("Question: {}\n", task.question.trim());
    if let Some(choices) = &task.choices {
        msg.push_str("Choices:\n");
        for (i, choice) in choices.iter().enumerate() {
            msg.push_str(&format!("({}) {}\n", choice_label(i), choice));
        }
    }
    msg.push_str("Audio files:\n");
    for audio in &task.audio_refs {
        msg.push_str(&format!("- {audio}\n"));
    }
    msg
}

/// `a`, `b`, ... `z`, then `aa`, `ab`, ...
pub fn choice_label(index: usize) -> String {
    let mut n = index;
    let mut label = Vec::new();
    loop {
        label.push(b'a' + (n % 26) as u8);
        if n < 26 {
            break;
        }
        n = n / 26 - 1;
    }
    label.reverse();
    String::from_utf8(label).expect("ascii")
}

/// Audio paths listed in a user message built by [`build_user_message`].
pub fn audio_refs_in_user_message(message: &str) -> Vec<String> {
    message
        .lines()
        .skip_while(|l| l.trim() != "Audio files:")
        .skip(1)
        .map_while(|l| l.strip_prefix("- "))
        .map(str::to_string)
        .collect()
}
