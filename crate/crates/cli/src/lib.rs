//! Command-line front end: configuration parsing and the subcommands.

pub mod commands;
pub mod config;

pub use commands::CliError;
pub use config::{parse_config, ConfigError, RunConfig};
