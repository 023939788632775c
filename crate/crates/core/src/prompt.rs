//! Chat-template text for both channels.
//!
//! Every segment appended after the base prompt opens by closing the previous
//! message, so the permanent prefix never needs rewriting when a turn is
//! rewound.

use crate::dispatch::{AgentMode, ToolMode};
use crate::schema::{self, ToolCard};
use crate::tokenizer::Tokenizer;
use crate::toolenv::ToolRegistry;

pub const SYSTEM_OPEN: &str = "<|im_start|>system\n";
pub const TURN_CLOSE: &str = "<|im_end|>\n";
pub const USER_OPEN: &str = "<|im_start|>user\n";
pub const ASSISTANT_OPEN: &str = "<|im_start|>assistant\n";
pub const CSO_HEADER: &str = "This is a current status of the conversation.\n";

pub const DEFAULT_PREAMBLE_FULL: &str = "You are an on-device assistant. Answer directly when no tool is needed. \
To use a tool reply with <tool_call>{\"name\":...,\"arguments\":{...}}</tool_call> and nothing else. \
Hard or open-ended questions go to the cloud tool.";

pub const DEFAULT_PREAMBLE_JIT: &str = "You are an on-device assistant. Answer directly when no tool is needed. \
To use a tool first reply <tool_select>{\"name\":...,\"reason\":...}</tool_select>; its schema follows, \
then reply <tool_call>{\"name\":...,\"arguments\":{...}}</tool_call>.";

pub const DEFAULT_TRACKER_CONTRACT: &str = "You maintain a checklist that records the state of a conversation between a user and an assistant. \
You receive the checklist so far and the newest messages. Reply with only the new lines to add, one fact per line, \
in short key: value form (for example user_goal, completed_steps, ticket_id, tool_error). Never repeat a line that is \
already present and never rewrite earlier lines. If nothing new needs recording, reply with exactly: # NO_UPDATE";

/// Tool section of the system prompt for a tool mode.
pub fn tools_section(
    mode: ToolMode,
    registry: &ToolRegistry,
    tok: &dyn Tokenizer,
    bank_description_limit: Option<usize>,
) -> String {
    match mode {
        ToolMode::FullSchemas => {
            let lines: Vec<String> = registry
                .schemas()
                .map(|s| schema::minify(s, tok).text)
                .collect();
            format!("<tools>\n{}\n</tools>", lines.join("\n"))
        }
        ToolMode::Jit => {
            let cards: Vec<ToolCard> = registry
                .schemas()
                .map(|s| s.card().truncated(bank_description_limit))
                .collect();
            let bank = schema::tool_bank_text(&cards).expect("registry ids are unique");
            format!("<tool_bank>\n{bank}\n</tool_bank>")
        }
    }
}

/// Permanent prefix of the executor channel.
pub fn executor_base(
    preamble: &str,
    tools_section: &str,
    mode: AgentMode,
    cso_text: &str,
) -> String {
    let mut out = format!("{SYSTEM_OPEN}{preamble}\n{tools_section}");
    if mode.uses_cso() {
        out.push('\n');
        out.push_str(CSO_HEADER);
        out.push_str(cso_text);
    }
    out
}

fn message(role_open: &str, body: &str) -> String {
    format!("{TURN_CLOSE}{role_open}{body}{TURN_CLOSE}{ASSISTANT_OPEN}")
}

pub fn user_segment(text: &str) -> String {
    message(USER_OPEN, text)
}

pub fn observation_segment(observation: &str) -> String {
    message(
        USER_OPEN,
        &format!("<tool_response>\n{observation}\n</tool_response>"),
    )
}

pub fn schema_injection_segment(compact: &str) -> String {
    message(
        USER_OPEN,
        &format!("<tool_schema>\n{compact}\n</tool_schema>"),
    )
}

pub fn default_preamble(mode: AgentMode) -> &'static str {
    if mode.is_jit() {
        DEFAULT_PREAMBLE_JIT
    } else {
        DEFAULT_PREAMBLE_FULL
    }
}
