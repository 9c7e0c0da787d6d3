use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: String, detail: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("tape has already been consumed by a backward pass")]
    TapeConsumed,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("network spec is empty")]
    EmptySpec,

    #[error("sparsity target cannot be met: {0}")]
    Infeasible(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint architecture mismatch: {0}")]
    Architecture(String),

    #[error("missing checkpoint for step {0}")]
    MissingCheckpoint(u64),

    #[error("malformed IDX file {path}: {reason}")]
    Idx { path: PathBuf, reason: String },

    #[error("mask mismatch between parameter points")]
    MaskMismatch,

    #[error("too many active coordinates for a dense Hessian: {active} > cap {cap}")]
    HessianCap { active: usize, cap: usize },

    #[error("matrix is not symmetric (max defect {0:e})")]
    NotSymmetric(f64),

    /// `snapshot` is the checkpoint encoding of the last finite state
    /// (weights, masks, velocity) before the failing step.
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: u64, loss: f64, snapshot: Box<Vec<u8>> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            detail: detail.into(),
        }
    }
}
