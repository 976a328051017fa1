use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value produced by {op} (tape node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("numerical abort at epoch {epoch}, step {step}: {detail}")]
    NumericalAbort {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("unknown layer {0:?}")]
    UnknownLayer(String),

    #[error("cosine similarity undefined: both weight vectors of {0:?} are zero")]
    ZeroVectors(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code for the CLI: 1 config, 2 numerical, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::NumericalAbort { .. } => 2,
            Error::Io { .. } | Error::Csv(_) | Error::Format { .. } => 3,
            _ => 1,
        }
    }
}
