use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DifdError>;

/// Errors raised anywhere in the library.
///
/// The CLI maps these onto exit codes via [`DifdError::category`].
#[derive(Debug, Error)]
pub enum DifdError {
    #[error("{op}: shape mismatch, expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("empty softmax support in row {row}")]
    EmptySoftmaxSupport { row: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("missing gradients for parameters: {}", .0.join(", "))]
    MissingGradients(Vec<String>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse error class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Numeric,
}

impl DifdError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            DifdError::Config(_) => ErrorCategory::Usage,
            DifdError::Shape { .. }
            | DifdError::EmptySoftmaxSupport { .. }
            | DifdError::NonScalarLoss(_)
            | DifdError::TapeConsumed
            | DifdError::MissingGradients(_)
            | DifdError::NonFinite(_) => ErrorCategory::Numeric,
            _ => ErrorCategory::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DifdError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        DifdError::Shape {
            op,
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
