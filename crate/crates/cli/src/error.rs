use thiserror::Error;

/// Errors surfaced by the command line. The variant decides the exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    /// Machine-parsable stderr prefix.
    pub fn prefix(&self) -> &'static str {
        match self {
            CliError::Config(_) => "error[config]",
            CliError::Runtime(_) => "error[runtime]",
        }
    }

    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}
