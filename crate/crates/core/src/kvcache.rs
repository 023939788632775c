//! Token-count ledger for the two adapter channels.
//!
//! Each channel keeps a permanent region (system text, tools, committed log
//! lines) and an ephemeral region (the current turn). Ephemeral text is
//! rewound before the next turn; committed deltas only ever grow the
//! permanent region. The ledger holds text alongside counts so the prompt a
//! backend receives can always be replayed byte-for-byte.

use serde::{Deserialize, Serialize};

use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterId {
    Executor,
    Tracker,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CacheError {
    #[error("{0:?} cache is already primed")]
    AlreadyPrimed(AdapterId),
    #[error("{0:?} cache is not primed")]
    NotPrimed(AdapterId),
    #[error("base prompt is empty")]
    EmptyBasePrompt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum CacheEventKind {
    Prime,
    ExtendEphemeral,
    Rewind,
    CommitDelta,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CacheEvent {
    pub kind: CacheEventKind,
    /// Tokens added, or for a rewind the number of tokens discarded.
    pub delta_tokens: usize,
    pub turn_index: u32,
    pub permanent_len: usize,
    pub ephemeral_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CacheState {
    pub adapter_id: AdapterId,
    primed: bool,
    permanent_text: String,
    permanent_len: usize,
    /// Exact count of `permanent_text`; `permanent_len` is the ledger value,
    /// which is never allowed to shrink.
    permanent_count: usize,
    ephemeral_text: String,
    ephemeral_len: usize,
    history: Vec<CacheEvent>,
}

impl CacheState {
    pub fn new(adapter_id: AdapterId) -> Self {
        Self {
            adapter_id,
            primed: false,
            permanent_text: String::new(),
            permanent_len: 0,
            permanent_count: 0,
            ephemeral_text: String::new(),
            ephemeral_len: 0,
            history: Vec::new(),
        }
    }

    /// Shorthand for `new` followed by `prime`.
    pub fn prime(
        adapter_id: AdapterId,
        base_prompt: &str,
        tok: &dyn Tokenizer,
    ) -> Result<Self, CacheError> {
        let mut c = Self::new(adapter_id);
        c.prime_with(base_prompt, tok)?;
        Ok(c)
    }

    pub fn prime_with(&mut self, base_prompt: &str, tok: &dyn Tokenizer) -> Result<(), CacheError> {
        if self.primed {
            return Err(CacheError::AlreadyPrimed(self.adapter_id));
        }
        if base_prompt.is_empty() {
            return Err(CacheError::EmptyBasePrompt);
        }
        self.primed = true;
        self.permanent_text = base_prompt.to_string();
        self.permanent_count = tok.count_tokens(base_prompt);
        self.permanent_len = self.permanent_count;
        self.record(CacheEventKind::Prime, self.permanent_len, 0);
        Ok(())
    }

    fn ensure_primed(&self) -> Result<(), CacheError> {
        if self.primed {
            Ok(())
        } else {
            Err(CacheError::NotPrimed(self.adapter_id))
        }
    }

    fn record(&mut self, kind: CacheEventKind, delta_tokens: usize, turn_index: u32) {
        self.history.push(CacheEvent {
            kind,
            delta_tokens,
            turn_index,
            permanent_len: self.permanent_len,
            ephemeral_len: self.ephemeral_len,
        });
    }

    pub fn extend_ephemeral(
        &mut self,
        text: &str,
        turn_index: u32,
        tok: &dyn Tokenizer,
    ) -> Result<(), CacheError> {
        self.ensure_primed()?;
        if text.is_empty() {
            return Ok(());
        }
        let before = self.ephemeral_len;
        self.ephemeral_len = tok.count_appended(&self.ephemeral_text, before, text);
        self.ephemeral_text.push_str(text);
        self.record(
            CacheEventKind::ExtendEphemeral,
            self.ephemeral_len.saturating_sub(before),
            turn_index,
        );
        Ok(())
    }

    /// Drops the ephemeral region and returns the number of tokens discarded.
    /// A rewind of an already clean cache records nothing.
    pub fn rewind(&mut self, turn_index: u32) -> Result<usize, CacheError> {
        self.ensure_primed()?;
        let discarded = self.ephemeral_len;
        if self.ephemeral_text.is_empty() {
            return Ok(0);
        }
        self.ephemeral_text.clear();
        self.ephemeral_len = 0;
        self.record(CacheEventKind::Rewind, discarded, turn_index);
        Ok(discarded)
    }

    /// Appends rendered log lines to the permanent region. The ephemeral
    /// region is kept and now follows the extended prefix.
    pub fn commit_delta(
        &mut self,
        delta_text: &str,
        turn_index: u32,
        tok: &dyn Tokenizer,
    ) -> Result<(), CacheError> {
        self.ensure_primed()?;
        if delta_text.is_empty() {
            return Ok(());
        }
        let before = self.permanent_len;
        self.permanent_count =
            tok.count_appended(&self.permanent_text, self.permanent_count, delta_text);
        self.permanent_text.push_str(delta_text);
        self.permanent_len = self.permanent_count.max(before);
        self.record(
            CacheEventKind::CommitDelta,
            self.permanent_len - before,
            turn_index,
        );
        Ok(())
    }

    /// The exact bytes the adapter's next generation must be conditioned on.
    pub fn full_prompt_text(&self) -> Result<String, CacheError> {
        self.ensure_primed()?;
        Ok(format!("{}{}", self.permanent_text, self.ephemeral_text))
    }

    /// Token count of [`Self::full_prompt_text`].
    pub fn prompt_tokens(&self, tok: &dyn Tokenizer) -> usize {
        tok.count_appended(
            &self.permanent_text,
            self.permanent_count,
            &self.ephemeral_text,
        )
    }

    pub fn is_primed(&self) -> bool {
        self.primed
    }

    pub fn permanent_text(&self) -> &str {
        &self.permanent_text
    }

    pub fn permanent_len(&self) -> usize {
        self.permanent_len
    }

    pub fn ephemeral_text(&self) -> &str {
        &self.ephemeral_text
    }

    pub fn ephemeral_len(&self) -> usize {
        self.ephemeral_len
    }

    pub fn history(&self) -> &[CacheEvent] {
        &self.history
    }

    pub fn snapshot(&self) -> CacheSnapshot {
        CacheSnapshot {
            adapter_id: self.adapter_id,
            permanent_len: self.permanent_len,
            ephemeral_len: self.ephemeral_len,
            history: self.history.clone(),
        }
    }
}

/// Read-only view served by the inspection endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CacheSnapshot {
    pub adapter_id: AdapterId,
    pub permanent_len: usize,
    pub ephemeral_len: usize,
    pub history: Vec<CacheEvent>,
}
