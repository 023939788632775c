//! HTTP service and command line over `ctxagent-core`.

pub mod cli;
pub mod service;
