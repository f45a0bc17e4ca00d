use thiserror::Error;

/// Errors produced anywhere in the balancing and estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("non-finite basis value at observation {observation}, column {column}")]
    NonFiniteBasis { observation: usize, column: usize },

    #[error("every moment column is degenerate (zero variance)")]
    EmptySystem,

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("dual problem diverged: {0}")]
    DivergingDual(String),

    #[error("delta tuning failed on every grid point: {0}")]
    TuningFailed(String),

    #[error("degenerate distances: {0}")]
    DegenerateDistance(String),

    #[error("singular design; dependent columns {columns:?}")]
    SingularDesign { columns: Vec<usize> },

    #[error("singular hessian in sandwich variance")]
    SingularHessian,

    #[error("value {value} outside domain [0, 1]")]
    Domain { value: f64 },

    #[error("unsupported data-generating process: {0}")]
    UnsupportedDgp(String),

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error("bootstrap failed: {failed} of {total} replicates did not solve")]
    Bootstrap { failed: usize, total: usize },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures that come from a solver rather than malformed input.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::DivergingDual(_)
                | Error::TuningFailed(_)
                | Error::SingularDesign { .. }
                | Error::SingularHessian
                | Error::Bootstrap { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
