//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty sample")]
    EmptySample,

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("points and labels have different lengths ({points} vs {labels})")]
    LengthMismatch { points: usize, labels: usize },

    #[error("dataset contains a single label class")]
    SingleLabel,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("theta {theta:?} outside the domain of setting {setting}")]
    ThetaOutOfDomain { setting: String, theta: Vec<f64> },

    #[error("no fitted state for theta {theta:?}")]
    ThetaNotFitted { theta: Vec<f64> },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("local test failed at theta {theta:?} (draw {index}, {completed} completed): {source}")]
    LocalTestFailed {
        theta: Vec<f64>,
        index: usize,
        completed: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than internal failure.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Io(e) => matches!(
                e.kind(),
                std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied
            ),
            // JSON errors only arise when parsing user-supplied files
            Error::Json(_) => true,
            Error::LocalTestFailed { source, .. } => source.is_usage(),
            _ => true,
        }
    }
}
