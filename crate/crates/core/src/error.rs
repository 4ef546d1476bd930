use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the attack engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: expected {expected}, got {actual}")]
    BadDimension {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("input length {required} exceeds model maximum {max}")]
    LengthOverflow { required: usize, max: usize },

    #[error("corpus error at row {row}: {message}")]
    Corpus { row: usize, message: String },

    #[error("corpus has {available} records, need {requested}")]
    InsufficientRecords { requested: usize, available: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown preset {name:?}; valid presets: {valid}")]
    UnknownPreset { name: String, valid: String },

    #[error("training failed to reach thresholds within budget: refusal rate {refusal_rate:.1}%, benign prefix rate {benign_rate:.1}%")]
    TrainingFailure { refusal_rate: f64, benign_rate: f64 },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint version mismatch: file has {found}, supported {supported}")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("artifact error at {path}: {message}")]
    Artifact { path: PathBuf, message: String },

    #[error("judge endpoint failure: {0}")]
    Judge(String),

    #[error("degenerate gradient: {0}")]
    DegenerateGradient(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
