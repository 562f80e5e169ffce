//! Library surface of the CLI: command implementations and the run-config
//! schema, kept callable so integration tests drive them in-process.

pub mod commands;
pub mod config;
pub mod loader;
