//! Command-line front end: configuration resolution and subcommands.

pub mod commands;
pub mod config;

pub use config::{parse_config, Command, ParseError, RunConfig};
