//! File formats, configuration and subcommands for the `ctxssl` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod log;
pub mod report;
pub mod world_io;

pub use config::RunConfig;
pub use error::{CliError, Result};
