use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("{path}: line {line}: {msg}")]
    Parse { path: String, line: u64, msg: String },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("missing key {0}")]
    MissingKey(String),

    #[error("missing reference for patch `{0}`")]
    MissingReference(String),

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("{0}: every anchor had an empty positive set")]
    AllAnchorsSkipped(&'static str),

    #[error("correlation undefined: {0}")]
    Undefined(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("external tool failed: {msg}\n--- captured output ---\n{output}")]
    Tool { msg: String, output: String },

    #[error("metric mismatch: `{0}` vs `{1}`")]
    MetricMismatch(String, String),

    #[error("loss became non-finite at step {step}: {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format { what, msg: msg.into() }
    }

    pub(crate) fn parse(path: &Path, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { path: path.display().to_string(), line: line as u64, msg: msg.into() }
    }
}
