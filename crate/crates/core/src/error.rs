use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("invalid tensor: {0}")]
    Tensor(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("singular system: smallest pivot {pivot:.3e} at column {col}")]
    Singular { pivot: f64, col: usize },

    #[error("iteration did not converge: {what} (last value {last:.6e})")]
    NonConvergence { what: String, last: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("window under-resolved: required length {required:.3e} below step {step:.3e}")]
    WindowUnderResolved { required: f64, step: f64 },

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
