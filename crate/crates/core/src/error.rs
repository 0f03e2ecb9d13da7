use std::path::PathBuf;

use crate::nrp::JudgeError;

/// Errors raised across the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid vocabulary: {0}")]
    Vocab(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Lemma-1 identity only holds for rows whose policy-weighted advantage mean is zero.
    #[error("advantage row for {context} is not centered (policy-weighted mean {mean:e})")]
    Uncentered { context: String, mean: f64 },

    #[error("correct rollout {index} in group has no NRP end index")]
    MissingNrp { index: usize },

    #[error("judge unavailable: {0}")]
    Judge(#[from] JudgeError),

    #[error("resampling budget exhausted: {0}")]
    ResampleBudget(String),

    #[error("enumeration guard exceeded: more than {limit} sequences")]
    EnumerationGuard { limit: usize },

    #[error("probe not applicable: {0}")]
    NotApplicable(String),

    #[error("config error at line {line}: {message}")]
    ConfigLine { line: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed {what} at line {line}: {message}")]
    Parse {
        what: &'static str,
        line: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
