//! File formats, run configuration, experiment harness and CLI for the
//! co-evolving tokenizer in `coevo-core`.
//!
//! The binary `coevo` exposes the pipeline as subcommands (`synth`,
//! `warmup`, `coevolve`, `eval`, `inspect-index`, `entropy-report`,
//! `gradcheck`); everything it does is available here as library calls.

pub mod config;
pub mod error;
pub mod formats;
pub mod harness;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
