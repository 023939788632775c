//! Typed conversation events and their JSONL persistence.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
    Tracker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum TurnKind {
    SessionStart,
    UserMessage,
    DirectResponse,
    ToolSelect,
    ToolCall,
    CloudDelegate,
    Observation,
    SchemaInjection,
    StateUpdate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Turn {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    /// Position in the session's event sequence.
    pub turn_index: u32,
    pub role: Role,
    pub kind: TurnKind,
    pub content: String,
    /// Prompt tokens the executor was conditioned on; assistant turns only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_context_tokens: Option<usize>,
    /// 1-based count of executor generations in the session.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assistant_turn: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arguments: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<String>,
}

impl Turn {
    fn bare(turn_index: u32, role: Role, kind: TurnKind, content: impl Into<String>) -> Self {
        Self {
            session_id: None,
            turn_index,
            role,
            kind,
            content: content.into(),
            input_context_tokens: None,
            assistant_turn: None,
            tool_name: None,
            arguments: None,
            success: None,
            stop_reason: None,
        }
    }

    pub fn user(turn_index: u32, text: impl Into<String>) -> Self {
        Self::bare(turn_index, Role::User, TurnKind::UserMessage, text)
    }

    pub fn assistant(
        turn_index: u32,
        assistant_turn: u32,
        kind: TurnKind,
        content: impl Into<String>,
        input_context_tokens: usize,
    ) -> Self {
        Self {
            assistant_turn: Some(assistant_turn),
            input_context_tokens: Some(input_context_tokens),
            ..Self::bare(turn_index, Role::Assistant, kind, content)
        }
    }

    pub fn assistant_text(
        turn_index: u32,
        assistant_turn: u32,
        content: impl Into<String>,
        input_context_tokens: usize,
    ) -> Self {
        Self::assistant(
            turn_index,
            assistant_turn,
            TurnKind::DirectResponse,
            content,
            input_context_tokens,
        )
    }

    pub fn tool(turn_index: u32, kind: TurnKind, content: impl Into<String>) -> Self {
        Self::bare(turn_index, Role::Tool, kind, content)
    }

    pub fn system(turn_index: u32, kind: TurnKind, content: impl Into<String>) -> Self {
        Self::bare(turn_index, Role::System, kind, content)
    }

    pub fn tracker(turn_index: u32, content: impl Into<String>) -> Self {
        Self::bare(turn_index, Role::Tracker, TurnKind::StateUpdate, content)
    }

    pub fn is_assistant(&self) -> bool {
        self.role == Role::Assistant
    }

    /// How the state tracker sees this turn, if at all.
    pub fn tracker_line(&self) -> Option<String> {
        match (self.role, self.kind) {
            (Role::User, _) => Some(format!("USER: {}", self.content)),
            (Role::Assistant, _) => Some(format!("ASSISTANT: {}", self.content)),
            (Role::Tool, TurnKind::Observation) => Some(format!("TOOL: {}", self.content)),
            _ => None,
        }
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl<W: Write>(mut out: W, turns: &[Turn]) -> std::io::Result<()> {
    for t in turns {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> std::io::Result<Vec<Turn>> {
    let mut turns = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        turns.push(t);
    }
    Ok(turns)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let mut call = Turn::assistant(1, 1, TurnKind::ToolCall, "<tool_call>{}</tool_call>", 120);
        call.tool_name = Some("set_timer".into());
        call.arguments = Some(serde_json::json!({"duration_seconds": 1200}));
        call.session_id = Some("s1".into());
        let turns = vec![Turn::user(0, "Set a timer for 20 minutes."), call];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &turns).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"inputContextTokens\":120"));
        assert!(text.contains("\"sessionId\":\"s1\""));
        assert_eq!(read_jsonl(&buf[..]).unwrap(), turns);
    }
}
