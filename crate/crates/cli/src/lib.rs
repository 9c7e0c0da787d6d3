//! Command-line runner for sparselab: single training runs, checkpoint
//! analysis, initialization probes and the reproduction recipes.

pub mod commands;
pub mod config;
pub mod output;
pub mod recipes;
pub mod stats;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration or arguments; exit code 1.
    #[error("configuration error: {0}")]
    Config(String),
    /// Failure while running (I/O, divergence, numerical errors); exit code 2.
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn from_core(e: sparselab::Error) -> Self {
        match e {
            sparselab::Error::Config(_) | sparselab::Error::Infeasible(_) | sparselab::Error::EmptySpec => {
                CliError::Config(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}
