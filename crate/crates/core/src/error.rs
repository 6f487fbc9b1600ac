use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range (valid: 0..={max})")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("paths do not share a time grid")]
    GridMismatch,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("size mismatch: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Carries the successive gaps so callers can inspect the decay.
    #[error("Picard iteration did not reach tolerance after {iterations} iterations (last gap {last_gap:e})")]
    NonConvergence {
        iterations: usize,
        last_gap: f64,
        gaps: Vec<f64>,
    },

    #[error("covariance factorization failed: {0}")]
    Factorization(String),

    #[error("point outside the closed domain (violation {0:e})")]
    OutsideDomain(f64),

    #[error("infeasible polyhedron: {0}")]
    Infeasible(String),

    #[error("all {0} sampled pairs were degenerate")]
    DegenerateSample(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("malformed data: {0}")]
    Malformed(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
