use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DartsError>;

#[derive(Debug, Error)]
pub enum DartsError {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error: {0}")]
    Shape(String),

    /// Input outside the mathematical domain of an operation (e.g. log of a non-positive value).
    #[error("domain error: {0}")]
    Domain(String),

    /// A scalar hyperparameter is out of range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Softmax row with every entry masked out.
    #[error("degenerate row: {0}")]
    DegenerateRow(String),

    /// A caller violated an API precondition.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error at {location}: {message}")]
    Format { location: String, message: String },

    #[error("insufficient data: need at least {required} timesteps, got {actual}")]
    InsufficientData { required: usize, actual: usize },

    #[error("non-finite value in {term}: {detail}")]
    NonFinite { term: String, detail: String },

    #[error("checkpoint incompatible: {0}")]
    Compatibility(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DartsError {
    pub fn shape(msg: impl Into<String>) -> Self {
        Self::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Self::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn format(location: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Format {
            location: location.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Parameter(_) => 1,
            Self::NonFinite { .. } | Self::Domain(_) | Self::DegenerateRow(_) => 3,
            _ => 2,
        }
    }
}
