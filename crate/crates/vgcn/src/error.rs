//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by tensor ops, graph construction, model assembly,
/// file I/O and training.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid axis or index.
    #[error("index error: {0}")]
    Index(String),

    /// Invalid configuration (layer widths, kernel sizes, flag values).
    #[error("config error: {0}")]
    Config(String),

    /// An operation contract was violated (non-scalar loss, missing grad,
    /// nonpositive variance, detached tensor).
    #[error("contract error: {0}")]
    Contract(String),

    /// Dataset-level problem (empty dataset, label out of range).
    #[error("data error: {0}")]
    Data(String),

    /// Graph validation failure; each entry names one violation.
    #[error("graph validation failed: {}", .0.join("; "))]
    GraphValidation(Vec<String>),

    /// The model does not support the requested capability
    /// (e.g. attention export on a model without attention).
    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    /// Required cached state is missing (filtered attention not attached).
    #[error("state error: {0}")]
    State(String),

    /// File does not parse as the expected document at all.
    #[error("malformed file: {0}")]
    Malformed(String),

    /// File parses but violates the schema; message carries the JSON path.
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },

    /// Checkpoint format version not handled by this build.
    #[error("version error: file has format version {found}, this build reads version {supported}")]
    Version { found: u32, supported: u32 },

    /// Checkpoint/architecture incompatibility; names the first mismatch.
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
    pub fn unsupported(msg: impl Into<String>) -> Self {
        Error::UnsupportedModel(msg.into())
    }
    pub fn index(msg: impl Into<String>) -> Self {
        Error::Index(msg.into())
    }
    pub fn malformed(msg: impl Into<String>) -> Self {
        Error::Malformed(msg.into())
    }
    pub fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }
    pub fn incompatible(msg: impl Into<String>) -> Self {
        Error::Incompatible(msg.into())
    }
}
