use thiserror::Error;

/// Errors produced by the simulation library.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("dense materialization refused: dimension {d} exceeds limit {limit}")]
    DimensionGuard { d: usize, limit: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive semidefinite (smallest eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {off:e})")]
    NoConvergence { sweeps: usize, off: f64 },

    #[error("diverged at step {step}: non-finite value on worker {worker}")]
    Diverged { step: usize, worker: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("failed to parse {what}: {msg}")]
    Parse { what: &'static str, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
