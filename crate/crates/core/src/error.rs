use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("unsupported {kind} version {found} (expected {expected})")]
    Version {
        kind: &'static str,
        found: u16,
        expected: u16,
    },

    #[error("profile mismatch: {0}")]
    ProfileMismatch(String),

    #[error("non-finite value during {stage} at epoch {epoch}: {detail}")]
    Numeric {
        stage: &'static str,
        epoch: usize,
        detail: String,
    },

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Process exit categories for the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCategory {
    Internal = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    Io = 5,
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn category(&self) -> ExitCategory {
        match self {
            Error::Config(_) | Error::ProfileMismatch(_) => ExitCategory::Config,
            Error::Data(_) | Error::Parse { .. } | Error::Version { .. } => ExitCategory::Data,
            Error::Numeric { .. } => ExitCategory::Numeric,
            Error::Io(_) => ExitCategory::Io,
            Error::Fold { source, .. } => source.category(),
            Error::Shape { .. } | Error::Invalid(_) | Error::Json(_) => ExitCategory::Internal,
        }
    }

    pub fn with_fold(self, fold: usize) -> Self {
        Error::Fold {
            fold,
            source: Box::new(self),
        }
    }
}
