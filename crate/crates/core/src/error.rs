use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mask has no foreground voxels for the requested strategy")]
    NoForeground,

    /// A statistic is not defined for the given input (single-class labels,
    /// no comparable pairs, no events, ...).
    #[error("undefined: {0}")]
    Undefined(String),

    #[error("state error: {0}")]
    State(String),

    #[error("training error at step {step}: {message}")]
    Training { step: u64, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("did not converge: {0}")]
    Convergence(String),

    /// The censoring survival estimate vanished at a time the estimator needs.
    #[error("evaluation time error: {0}")]
    EvaluationTime(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn undefined(msg: impl Into<String>) -> Self {
        Error::Undefined(msg.into())
    }

    /// Short machine-readable tag, used in structured error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NoForeground => "no_foreground",
            Error::Undefined(_) => "undefined",
            Error::State(_) => "state",
            Error::Training { .. } => "training",
            Error::Data(_) => "data",
            Error::Convergence(_) => "convergence",
            Error::EvaluationTime(_) => "evaluation_time",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
