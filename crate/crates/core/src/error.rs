use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("index out of range: {what} = {value}, allowed {allowed}")]
    OutOfRange {
        what: &'static str,
        value: String,
        allowed: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("evaluation budget exceeded: {needed} evaluations requested, budget is {budget}")]
    BudgetExceeded { needed: usize, budget: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable short tag used in machine-parseable CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::OutOfRange { .. } => "out_of_range",
            Error::NonFinite(_) => "non_finite",
            Error::Degenerate(_) => "degenerate",
            Error::BudgetExceeded { .. } => "budget_exceeded",
            Error::Config(_) => "config",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    /// Process exit code for this error class. Zero is never returned.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } => 3,
            Error::BudgetExceeded { .. } => 4,
            Error::Format { .. } | Error::Json(_) => 5,
            Error::InvalidArgument(_) | Error::OutOfRange { .. } => 6,
            Error::ShapeMismatch(_) => 7,
            Error::NonFinite(_) | Error::Degenerate(_) => 8,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
