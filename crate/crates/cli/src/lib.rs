//! Command-line workflow over the `advtune` library: toy sweeps, dataset
//! analyses, tabular replays of the optimizer set and live tuning.

use std::fmt;

pub mod commands;
pub mod manifest;

/// Failure of a command, split by whose fault it is.
#[derive(Debug)]
pub enum CliError {
    /// Bad manifest, missing or malformed input, coverage gaps.
    Input(anyhow::Error),
    /// Everything else.
    Internal(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(e) => write!(f, "input error: {e:#}"),
            CliError::Internal(e) => write!(f, "internal error: {e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

/// Tag a fallible result as an input or internal failure.
pub trait Classify<T> {
    fn input(self) -> CliResult<T>;
    fn internal(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn input(self) -> CliResult<T> {
        self.map_err(|e| CliError::Input(e.into()))
    }

    fn internal(self) -> CliResult<T> {
        self.map_err(|e| CliError::Internal(e.into()))
    }
}
