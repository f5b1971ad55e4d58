use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("{op} did not converge after {iterations} sweeps")]
    NoConvergence { op: &'static str, iterations: usize },

    #[error("undefined input: {0}")]
    Undefined(String),

    #[error("training diverged at step {step} (loss = {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("digest mismatch in {what}: expected {expected}, found {found}")]
    Digest {
        what: String,
        expected: String,
        found: String,
    },

    #[error("malformed archive: {0}")]
    Archive(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
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

    /// Process exit code used by the command-line harness.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parameter(_) | Error::Shape { .. } | Error::Undefined(_) => 2,
            Error::Divergence { .. } | Error::NonFinite(_) | Error::NoConvergence { .. } => 3,
            Error::Digest { .. }
            | Error::Archive(_)
            | Error::Io { .. }
            | Error::Json(_)
            | Error::Csv(_) => 4,
        }
    }
}
