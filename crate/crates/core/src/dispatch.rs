//! Agent modes, the executor output protocol and the dispatch state machine.
//!
//! The turn loop itself lives in [`crate::session`]; this module decides what
//! an executor completion means.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::toolenv::ToolRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ToolMode {
    FullSchemas,
    Jit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum MemoryMode {
    FullHistory,
    CsoMemory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AgentMode {
    pub tool_mode: ToolMode,
    pub memory_mode: MemoryMode,
}

impl AgentMode {
    pub const BASELINE: Self = Self::new(ToolMode::FullSchemas, MemoryMode::FullHistory);
    pub const TOOL_EFFICIENT: Self = Self::new(ToolMode::Jit, MemoryMode::FullHistory);
    pub const MEMORY_EFFICIENT: Self = Self::new(ToolMode::FullSchemas, MemoryMode::CsoMemory);
    pub const COMBINED: Self = Self::new(ToolMode::Jit, MemoryMode::CsoMemory);

    pub const fn new(tool_mode: ToolMode, memory_mode: MemoryMode) -> Self {
        Self {
            tool_mode,
            memory_mode,
        }
    }

    pub fn name(&self) -> &'static str {
        match (self.tool_mode, self.memory_mode) {
            (ToolMode::FullSchemas, MemoryMode::FullHistory) => "baseline",
            (ToolMode::Jit, MemoryMode::FullHistory) => "tool-efficient",
            (ToolMode::FullSchemas, MemoryMode::CsoMemory) => "memory-efficient",
            (ToolMode::Jit, MemoryMode::CsoMemory) => "combined",
        }
    }

    pub fn is_jit(&self) -> bool {
        self.tool_mode == ToolMode::Jit
    }

    pub fn uses_cso(&self) -> bool {
        self.memory_mode == MemoryMode::CsoMemory
    }
}

impl fmt::Display for AgentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown agent mode '{0}'")]
pub struct UnknownMode(pub String);

/// Named agent modes, including short aliases used on the command line.
#[derive(Debug, Clone)]
pub struct ModeRegistry {
    modes: BTreeMap<String, AgentMode>,
}

impl Default for ModeRegistry {
    fn default() -> Self {
        let mut r = Self {
            modes: BTreeMap::new(),
        };
        for m in [
            AgentMode::BASELINE,
            AgentMode::TOOL_EFFICIENT,
            AgentMode::MEMORY_EFFICIENT,
            AgentMode::COMBINED,
        ] {
            r.register(m.name(), m);
        }
        r.register("jit", AgentMode::TOOL_EFFICIENT);
        r.register("mem", AgentMode::MEMORY_EFFICIENT);
        r
    }
}

impl ModeRegistry {
    pub fn register(&mut self, name: &str, mode: AgentMode) {
        self.modes.insert(name.to_ascii_lowercase(), mode);
    }

    pub fn get(&self, name: &str) -> Result<AgentMode, UnknownMode> {
        self.modes
            .get(&name.trim().to_ascii_lowercase())
            .copied()
            .ok_or_else(|| UnknownMode(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.modes.keys().map(String::as_str)
    }

    /// Parses a comma-separated list such as `baseline,mem`.
    pub fn parse_list(&self, list: &str) -> Result<Vec<AgentMode>, UnknownMode> {
        list.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| self.get(s))
            .collect()
    }
}

impl FromStr for AgentMode {
    type Err = UnknownMode;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModeRegistry::default().get(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ActionKind {
    DirectResponse,
    ToolSelect,
    ToolCall,
    CloudDelegate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AssistantAction {
    pub kind: ActionKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tool_name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arguments: Option<Map<String, Value>>,
}

impl AssistantAction {
    pub fn direct(text: impl Into<String>) -> Self {
        Self {
            kind: ActionKind::DirectResponse,
            text: Some(text.into()),
            tool_name: None,
            reasoning: None,
            arguments: None,
        }
    }

    fn call(kind: ActionKind, name: String, arguments: Map<String, Value>) -> Self {
        Self {
            kind,
            text: None,
            tool_name: Some(name),
            reasoning: None,
            arguments: Some(arguments),
        }
    }

    fn select(name: String, reason: String) -> Self {
        Self {
            kind: ActionKind::ToolSelect,
            text: None,
            tool_name: Some(name),
            reasoning: Some(reason),
            arguments: None,
        }
    }
}

/// Protocol violations; the loop turns these into error observations.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("malformed tool call: {0}")]
    MalformedToolCall(String),
    #[error("malformed tool selection: {0}")]
    MalformedToolSelect(String),
    #[error("unknown tool '{0}'")]
    UnknownTool(String),
    #[error("tool '{0}' must be selected before it is called")]
    NotSelected(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Phase {
    #[default]
    Idle,
    AwaitingSelection,
    AwaitingCall,
    AwaitingObservation,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DispatchState {
    pub phase: Phase,
    pub selected_tool: Option<String>,
    pub select_loop_count: u32,
}

impl DispatchState {
    /// A fresh user turn: nothing selected.
    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

pub const TOOL_CALL_OPEN: &str = "<tool_call>";
pub const TOOL_CALL_CLOSE: &str = "</tool_call>";
pub const TOOL_SELECT_OPEN: &str = "<tool_select>";
pub const TOOL_SELECT_CLOSE: &str = "</tool_select>";

/// Body between `open` and `close`. A missing close tag takes the rest of
/// the text. `None` when `open` is absent.
fn tagged<'a>(raw: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = raw.find(open)? + open.len();
    let rest = &raw[start..];
    Some(rest.find(close).map_or(rest, |end| &rest[..end]).trim())
}

fn parse_object(body: &str) -> Result<Map<String, Value>, String> {
    match serde_json::from_str::<Value>(body) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err("expected a JSON object".into()),
        Err(e) => Err(e.to_string()),
    }
}

/// Interprets one executor completion.
///
/// `<tool_select>` is only honored in two-stage mode. In that mode a call is
/// accepted only for the tool currently selected.
pub fn parse_assistant_output(
    raw: &str,
    state: &DispatchState,
    mode: AgentMode,
    registry: &ToolRegistry,
) -> Result<AssistantAction, ProtocolError> {
    if let Some(body) = tagged(raw, TOOL_CALL_OPEN, TOOL_CALL_CLOSE) {
        let obj = parse_object(body).map_err(ProtocolError::MalformedToolCall)?;
        let name = obj
            .get("name")
            .and_then(Value::as_str)
            .filter(|n| !n.is_empty())
            .ok_or_else(|| ProtocolError::MalformedToolCall("missing \"name\"".into()))?
            .to_string();
        let arguments = match obj.get("arguments") {
            None | Some(Value::Null) => Map::new(),
            Some(Value::Object(m)) => m.clone(),
            Some(Value::String(s)) => parse_object(s).map_err(ProtocolError::MalformedToolCall)?,
            Some(_) => {
                return Err(ProtocolError::MalformedToolCall(
                    "\"arguments\" must be an object".into(),
                ))
            }
        };
        if registry.by_name(&name).is_none() {
            return Err(ProtocolError::UnknownTool(name));
        }
        if mode.is_jit() && state.selected_tool.as_deref() != Some(name.as_str()) {
            return Err(ProtocolError::NotSelected(name));
        }
        let kind = if name == registry.cloud_tool_name() {
            ActionKind::CloudDelegate
        } else {
            ActionKind::ToolCall
        };
        return Ok(AssistantAction::call(kind, name, arguments));
    }
    if mode.is_jit() {
        if let Some(body) = tagged(raw, TOOL_SELECT_OPEN, TOOL_SELECT_CLOSE) {
            let obj = parse_object(body).map_err(ProtocolError::MalformedToolSelect)?;
            let name = obj
                .get("name")
                .and_then(Value::as_str)
                .filter(|n| !n.is_empty())
                .ok_or_else(|| ProtocolError::MalformedToolSelect("missing \"name\"".into()))?
                .to_string();
            if registry.by_name(&name).is_none() {
                return Err(ProtocolError::UnknownTool(name));
            }
            let reason = obj
                .get("reason")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string();
            return Ok(AssistantAction::select(name, reason));
        }
    }
    Ok(AssistantAction::direct(raw.trim()))
}
