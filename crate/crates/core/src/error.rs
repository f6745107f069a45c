use std::path::PathBuf;

/// Errors produced by the HAHE library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed fact at {path}:{line}: {reason}")]
    MalformedFact {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("capacity exceeded: fact has {qualifiers} qualifiers, sequence holds {max}")]
    Capacity { qualifiers: usize, max: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unknown label {0:?}")]
    UnknownLabel(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MalformedFact { .. } => "malformed_fact",
            Error::Shape(_) => "shape",
            Error::Index(_) => "index",
            Error::Capacity { .. } => "capacity",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFinite(_) => "non_finite",
            Error::UnknownLabel(_) => "unknown_label",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
