use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("unknown region id {id} (model has {regions} regions)")]
    UnknownRegion { id: usize, regions: usize },

    #[error("label {label} out of range at pixel (row {row}, col {col}); expected < {limit}")]
    LabelOutOfRange {
        label: u32,
        row: usize,
        col: usize,
        limit: usize,
    },

    #[error("loss term `{term}` is not finite ({value}) at step {step}")]
    LossNotFinite {
        term: &'static str,
        value: f64,
        step: u64,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unsupported {kind} version {found} (this build reads version {supported})")]
    Version {
        kind: &'static str,
        found: u32,
        supported: u32,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(what: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            what,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
