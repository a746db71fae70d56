//! Command-line orchestration: manifests, configuration, subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod overlay;

pub use commands::{run, Cli};
pub use error::{CliError, CliResult};
