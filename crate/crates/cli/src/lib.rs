//! Command implementations behind the `cda` binary, plus the annotation
//! HTTP service.

pub mod commands;
pub mod config;
pub mod error;
pub mod server;

pub use commands::{cmd_eval, cmd_generate, cmd_pseudo, cmd_train, EvalReport, RunManifest};
pub use config::RunConfig;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book_cli {}
