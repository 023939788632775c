//! The Context State Object: an append-only, semi-structured text log that
//! stands in for raw conversation history.
//!
//! After an assistant message the state-tracker channel is shown the current
//! log and the newest messages and replies with only the lines to append, or
//! with the [`NO_UPDATE`] sentinel.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError, Channel};
use crate::kvcache::{CacheError, CacheState};
use crate::tokenizer::Tokenizer;
use crate::turn::Turn;

/// First line of every log.
pub const CSO_PRIMING_LINE: &str = "# This is the start of the conversation.";
/// Tracker reply meaning "nothing to append".
pub const NO_UPDATE: &str = "# NO_UPDATE";

#[derive(Debug, thiserror::Error)]
pub enum MemoryError {
    #[error("delta for turn {got} does not follow turn {last}")]
    NonMonotoneTurn { last: u32, got: u32 },
    #[error("state tracker returned an empty completion")]
    EmptyOutput,
    #[error("no messages to summarize")]
    EmptyExchange,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

fn key_grammar() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^([a-z_]+):(?: (.*))?$").expect("static regex"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CsoEntry {
    pub raw_line: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
    pub turn_index: u32,
}

impl CsoEntry {
    pub fn new(raw_line: impl Into<String>, turn_index: u32) -> Self {
        let raw_line = raw_line.into();
        let (key, value) = match key_grammar().captures(&raw_line) {
            Some(c) => (
                Some(c[1].to_string()),
                Some(c.get(2).map_or("", |m| m.as_str()).to_string()),
            ),
            None => (None, None),
        };
        Self {
            raw_line,
            key,
            value,
            turn_index,
        }
    }
}

/// One tracker update.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CsoDelta {
    pub lines: Vec<String>,
    pub is_no_update: bool,
}

impl CsoDelta {
    pub fn no_update() -> Self {
        Self {
            lines: Vec::new(),
            is_no_update: true,
        }
    }

    pub fn lines<I, S>(lines: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            lines: lines.into_iter().map(Into::into).collect(),
            is_no_update: false,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// The exact text appended to the log and to both permanent cache
    /// regions: a newline separator followed by the joined lines, or the
    /// empty string.
    pub fn commit_text(&self) -> String {
        if self.lines.is_empty() {
            String::new()
        } else {
            format!("\n{}", self.lines.join("\n"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cso {
    entries: Vec<CsoEntry>,
    text: String,
    version: u32,
}

impl Default for Cso {
    fn default() -> Self {
        Self::new()
    }
}

impl Cso {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            text: CSO_PRIMING_LINE.to_string(),
            version: 0,
        }
    }

    pub fn entries(&self) -> &[CsoEntry] {
        &self.entries
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn contains_line(&self, line: &str) -> bool {
        self.text.lines().any(|l| l == line)
    }

    /// Appends `delta`, producing the next version. Empty and sentinel
    /// deltas leave the log untouched.
    pub fn apply_delta(&self, delta: &CsoDelta, turn_index: u32) -> Result<Cso, MemoryError> {
        if let Some(last) = self.entries.last() {
            if turn_index <= last.turn_index {
                return Err(MemoryError::NonMonotoneTurn {
                    last: last.turn_index,
                    got: turn_index,
                });
            }
        }
        if delta.is_no_update || delta.lines.is_empty() {
            return Ok(self.clone());
        }
        let mut next = self.clone();
        next.text.push_str(&delta.commit_text());
        next.entries.extend(
            delta
                .lines
                .iter()
                .map(|l| CsoEntry::new(l.clone(), turn_index)),
        );
        next.version += 1;
        Ok(next)
    }
}

/// Interprets a raw tracker completion against the current log.
///
/// The sentinel must match exactly after trimming. Lines already present
/// in `current` (or earlier in the same reply) are dropped.
pub fn parse_tracker_output(raw: &str, current: &Cso) -> Result<CsoDelta, MemoryError> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(MemoryError::EmptyOutput);
    }
    if trimmed == NO_UPDATE {
        return Ok(CsoDelta::no_update());
    }
    let mut seen = HashSet::new();
    let lines = raw
        .trim_end()
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.trim().is_empty())
        .filter(|l| !l.contains(NO_UPDATE))
        .filter(|l| !current.contains_line(l))
        .filter(|l| seen.insert(l.to_string()))
        .map(str::to_string)
        .collect();
    Ok(CsoDelta {
        lines,
        is_no_update: false,
    })
}

/// Fixed prompt pieces for the tracker channel.
pub mod tracker_prompt {
    pub const SYSTEM_OPEN: &str = "<|im_start|>system\n";
    pub const USER_OPEN: &str = "<|im_end|>\n<|im_start|>user\n";
    pub const PREVIOUS_CHECKLIST: &str = "[PREVIOUS CHECKLIST]\n";
    pub const NEW_MESSAGES: &str = "\n[NEW MESSAGES]\n";
    pub const ASSISTANT_CUE: &str = "<|im_end|>\n<|im_start|>assistant\n";

    /// Permanent prefix of the tracker channel for a given log text.
    pub fn base(contract: &str, cso_text: &str) -> String {
        format!("{SYSTEM_OPEN}{contract}\n{USER_OPEN}{PREVIOUS_CHECKLIST}{cso_text}")
    }
}

/// Renders the exchange in the `ROLE: content` form the tracker reads.
pub fn render_exchange(turns: &[Turn]) -> String {
    turns
        .iter()
        .filter_map(Turn::tracker_line)
        .collect::<Vec<_>>()
        .join("\n")
}

/// Everything a tracker update touches.
pub struct TrackerStep<'a> {
    pub cso: &'a mut Cso,
    pub cache: &'a mut CacheState,
    pub backend: &'a dyn Backend,
    pub tokenizer: &'a dyn Tokenizer,
    pub turn_index: u32,
}

#[derive(Debug, Clone)]
pub struct TrackerOutcome {
    pub delta: CsoDelta,
    pub raw_output: String,
    pub prompt_tokens: usize,
}

/// Runs the tracker channel over the latest exchange and applies its reply.
///
/// The tracker cache is rewound first; the exchange goes into its ephemeral
/// region. On any failure the log is left as it was.
pub fn run_tracker_turn(
    step: TrackerStep<'_>,
    exchange: &[Turn],
) -> Result<TrackerOutcome, MemoryError> {
    if exchange.is_empty() {
        return Err(MemoryError::EmptyExchange);
    }
    step.cache.rewind(step.turn_index)?;
    let segment = format!(
        "{}{}{}",
        tracker_prompt::NEW_MESSAGES,
        render_exchange(exchange),
        tracker_prompt::ASSISTANT_CUE
    );
    step.cache
        .extend_ephemeral(&segment, step.turn_index, step.tokenizer)?;
    let prompt = step.cache.full_prompt_text()?;
    let prompt_tokens = step.cache.prompt_tokens(step.tokenizer);
    let raw_output = step.backend.generate(&prompt, Channel::Tracker)?;
    let delta = parse_tracker_output(&raw_output, step.cso)?;
    let next = step.cso.apply_delta(&delta, step.turn_index)?;
    step.cache
        .extend_ephemeral(&raw_output, step.turn_index, step.tokenizer)?;
    *step.cso = next;
    Ok(TrackerOutcome {
        delta,
        raw_output,
        prompt_tokens,
    })
}
