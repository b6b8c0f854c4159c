use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid value for `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("class {class} has {count} training sample(s); clustering needs at least 2")]
    DegenerateClass { class: usize, count: usize },

    #[error("class label {0} is not covered by the cluster model")]
    UnseenClass(usize),

    #[error("non-finite loss at epoch {epoch}, batch {batch}\n{dump}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        dump: String,
    },

    #[error("checkpoint format version {found} is incompatible with supported version {expected}")]
    IncompatibleVersion { found: u64, expected: u64 },

    #[error("failed to parse {what}: {message}")]
    Parse { what: String, message: String },

    #[error("epoch {epoch}: {source}")]
    AtEpoch {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
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
    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
