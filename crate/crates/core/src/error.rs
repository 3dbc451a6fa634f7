//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or geometry mismatch in a numeric primitive or model surface.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: String, detail: String },

    /// Non-finite value where a finite one is required.
    #[error("non-finite input in {op}")]
    NonFinite { op: String },

    /// Attention mask containing values other than 0 and -inf.
    #[error("invalid mask in {op}: entries must be 0 or -inf")]
    InvalidMask { op: String },

    /// Backprop requested from a non-scalar output.
    #[error("backprop requires a scalar output, got shape {shape:?}")]
    NonScalarBackprop { shape: Vec<usize> },

    #[error("optimizer step rejected: {0}")]
    Optimizer(String),

    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("checkpoint error in `{field}`: {reason}")]
    Checkpoint { field: String, reason: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("task `{task}`: {reason}")]
    Task { task: String, reason: String },

    #[error("training aborted: {0}")]
    Training(String),

    #[error("frozen parameter group `{group}` received an update")]
    FreezeViolation { group: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op: op.to_string(),
            detail: detail.into(),
        }
    }

    pub fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    pub fn checkpoint(field: &str, reason: impl Into<String>) -> Self {
        Error::Checkpoint {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code category for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::MissingArtifact(_) => 3,
            Error::Io { .. } | Error::Json(_) => 4,
            Error::Training(_) | Error::Optimizer(_) | Error::FreezeViolation { .. } => 5,
            Error::Dataset(_) | Error::Task { .. } => 6,
            Error::Checkpoint { .. } => 7,
            Error::Eval(_) => 8,
            _ => 1,
        }
    }
}
