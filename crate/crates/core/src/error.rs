use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value for `{field}`: {value}")]
    NonFinite { field: &'static str, value: f64 },

    #[error("beta must be positive and finite, got {0}")]
    InvalidBeta(f64),

    #[error("rejected set is empty")]
    EmptyRejected,

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("token id {0} is outside the vocabulary")]
    TokenOutOfRange(usize),

    #[error("response is empty")]
    EmptyResponse,

    #[error("response is not terminated by the end-of-sequence token")]
    Unterminated,

    #[error("feature vector has dimension {got}, expected {expected}")]
    FeatureDim { expected: usize, got: usize },

    #[error("category `{0}` is not present in the image")]
    CategoryAbsent(String),

    #[error("batch is empty")]
    EmptyBatch,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset line {line}: {msg}")]
    Dataset { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(field: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { field, value })
    }
}
