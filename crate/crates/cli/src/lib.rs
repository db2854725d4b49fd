//! Command-line entry points and the HTTP intervention service.

pub mod arms;
pub mod commands;
pub mod config;
pub mod error;
pub mod server;

pub use commands::{run, Cli};
pub use config::Config;
pub use error::CliError;
