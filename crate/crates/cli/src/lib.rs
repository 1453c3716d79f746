//! Configuration handling and subcommands of the `hesslens` binary.

pub mod commands;
pub mod config;
pub mod error;

pub use error::CliError;
