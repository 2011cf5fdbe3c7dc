//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A matrix or vector argument had the wrong dimensions.
    #[error("shape mismatch in {context}: {details}")]
    Shape { context: &'static str, details: String },

    /// A scalar or count parameter was outside its admissible range.
    #[error("invalid parameter `{name}`: {details}")]
    Param { name: &'static str, details: String },

    /// The iterative SVD kernel failed to converge.
    #[error("SVD did not converge ({unconverged} superdiagonals remained after the iteration limit)")]
    SvdFailed { unconverged: i32 },

    /// A signal was too short for the requested Hankel depth.
    #[error("insufficient data: sequence length {len} < required {required}")]
    InsufficientData { len: usize, required: usize },

    /// The plant state left the finite range during integration.
    #[error("simulation diverged at step {step}: state became non-finite")]
    SimulationDiverged { step: usize },

    /// A QP solve inside the receding-horizon loop did not return an optimum.
    #[error("controller aborted at step {step}: QP status {status}")]
    SolverAbort { step: usize, status: String },

    /// Malformed run configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
