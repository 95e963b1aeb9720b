use thiserror::Error;

/// Errors produced by the prediction, assessment and steering layers.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the domain of a map (zero speed, steering at ±π/2, ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    /// Integrator chain longer than the closed-form Gramian supports.
    #[error("relative degree {degree} exceeds the supported maximum of {max}")]
    DegreeOverflow { degree: usize, max: usize },

    #[error("{solver} did not converge after {iterations} iterations (last gap {gap:e})")]
    NonConvergence {
        solver: &'static str,
        iterations: usize,
        gap: f64,
    },

    /// A propagated particle left the valid state set (v ≤ 0).
    #[error("particle {particle} became invalid at t = {time}")]
    Integration { particle: usize, time: f64 },

    #[error("singular flat state for particle {particle} at t = {time}")]
    SingularFlatState { particle: usize, time: f64 },

    #[error("snapshot time grids do not match")]
    TimeGridMismatch,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
