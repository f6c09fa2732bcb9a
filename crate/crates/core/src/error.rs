//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GodeError>;

#[derive(Debug, Error)]
pub enum GodeError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid B-spline basis: need n >= k+1, got degree k={degree}, n={n_control}")]
    InvalidBasis { degree: usize, n_control: usize },

    #[error("B-spline domain error: t={t} outside [0, {t_max}]")]
    Domain { t: f64, t_max: f64 },

    #[error("autodiff error: {0}")]
    Autodiff(String),

    #[error("solver diverged: non-finite state at step {step}")]
    Divergence { step: usize },

    #[error("solver did not converge within {max_steps} steps")]
    NonConvergence { max_steps: usize },

    #[error("data format error in {file} at offset {offset}: {msg}")]
    Format {
        file: String,
        offset: u64,
        msg: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, iteration {iteration}: {msg}")]
    TrainingDiverged {
        epoch: usize,
        iteration: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GodeError {
    /// Exit code for the CLI: configuration problems get 2, everything else 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            GodeError::Config(_) | GodeError::InvalidBasis { .. } => 2,
            _ => 1,
        }
    }
}
