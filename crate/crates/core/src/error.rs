use thiserror::Error;

/// Errors produced anywhere in the calibration and forecasting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error in `{field}`: {message}")]
    Format { field: String, message: String },

    #[error("assembly error on cell {cell}: {message}")]
    Assembly { cell: usize, message: String },

    #[error("point {index} lies outside the mesh")]
    OutOfDomain { index: usize },

    #[error("Newton iteration failed at time step {step}: residual {residual:e} after {iterations} iterations")]
    NewtonFailure {
        step: usize,
        residual: f64,
        iterations: usize,
    },

    #[error("linear solver breakdown: {0}")]
    Solver(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("{failed} of {total} samples failed, exceeding the allowed fraction")]
    BatchFailure { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    /// True for failures of the numerical solvers (as opposed to bad input).
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::NewtonFailure { .. } | Error::Solver(_) | Error::NonFinite(_) | Error::BatchFailure { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
