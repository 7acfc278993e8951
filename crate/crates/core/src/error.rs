use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss builder is not deterministic: forward passes gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("non-finite loss term {term} at step {step}")]
    NonFiniteLoss { term: &'static str, step: usize },

    #[error("unknown parameter {0}")]
    UnknownParam(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    Token { id: usize, vocab: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid trial {trial_id}: {violations}")]
    InvalidTrial {
        trial_id: String,
        violations: String,
    },

    #[error("pack count mismatch for trial {trial_id}: predicted {pred}, ground truth {gt}")]
    PackCount {
        trial_id: String,
        pred: usize,
        gt: usize,
    },

    #[error("ablation config {config} failed: {source}")]
    Ablation {
        config: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
