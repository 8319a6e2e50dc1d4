use std::path::PathBuf;

use thiserror::Error;

use crate::corpus::RationaleSpan;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("document {doc_id}: invalid rationale span {span}: {reason}")]
    InvalidSpan {
        doc_id: String,
        span: RationaleSpan,
        reason: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("document {doc_id}: no eligible tokens for replacement")]
    NoEligibleTokens { doc_id: String },

    #[error("document {doc_id}: no false-rationale token has a synonym candidate")]
    NoCandidatesAnywhere { doc_id: String },

    #[error("synonym provider failed (retryable: {retryable}): {message}")]
    Provider { message: String, retryable: bool },

    #[error("training set contains a single class")]
    SingleClass,

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("session {session_id}: phase {phase} does not allow {action}")]
    Phase {
        session_id: String,
        phase: String,
        action: String,
    },

    #[error("pending work: {}", .0.join(", "))]
    Pending(Vec<String>),

    #[error("not found: {0}")]
    NotFound(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input rather than a failing run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::InvalidSpan { .. }
                | Error::Validation(_)
                | Error::SingleClass
                | Error::Empty(_)
                | Error::Json(_)
        )
    }
}
