//! Error type shared by every module of the crate.

use thiserror::Error;

/// Everything that can go wrong while building models, stepping chains,
/// planning experiments or writing artifacts.
#[derive(Debug, Error)]
pub enum KlaError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The energy error of a proposal was NaN or infinite.
    #[error("diverged trajectory: energy error {delta_h} is not finite")]
    Diverged { delta_h: f64 },

    #[error("singular linear solve in the one-shot Jacobian")]
    SingularJacobian,

    #[error("{what} did not converge after {iterations} iterations")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
    },

    #[error("assumption violated: {0}")]
    AssumptionViolated(String),

    /// The residual sampler of the one-shot coupling ran out of proposals.
    #[error("residual sampler exhausted after {proposals} proposals (last ratio {last_ratio})")]
    ResidualExhausted { proposals: usize, last_ratio: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, KlaError>;
