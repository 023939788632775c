//! Context-efficient agent runtime.
//!
//! The executor and state-tracker channels share one [`backend::Backend`].
//! Conversation state lives in an append-only log ([`memory::Cso`]) whose
//! growth is mirrored into per-channel token ledgers ([`kvcache`]). Tools are
//! offered either as full compact schemas or as a names-only bank with
//! schemas injected on selection ([`dispatch`]).

pub mod backend;
pub mod dispatch;
pub mod eval;
pub mod fixtures;
pub mod kvcache;
pub mod memory;
pub mod prompt;
pub mod schema;
pub mod session;
pub mod tokenizer;
pub mod toolenv;
pub mod turn;

pub use dispatch::AgentMode;
pub use session::{Session, SessionConfig, SessionError};
