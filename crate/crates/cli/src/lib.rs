//! Command-line entry points and the reward/score HTTP service.

pub mod commands;
pub mod error;
pub mod models;
pub mod service;

pub use commands::{run, Cli, Command};
pub use error::CliError;
