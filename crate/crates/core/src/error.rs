//! Error type shared across the library.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty training split")]
    EmptyTrainingSplit,

    #[error("non-finite value at (patient {patient}, step {step}, channel {channel})")]
    NonFinite {
        patient: String,
        step: usize,
        channel: String,
    },

    #[error("unknown channel: {0}")]
    UnknownChannel(String),

    #[error("fractions must sum to 1 (got {0})")]
    BadFractions(f64),

    #[error("events out of order: t={t} after t={prev}")]
    EventsOutOfOrder { prev: f64, t: f64 },

    #[error("no usable samples for horizon {horizon}")]
    NoUsableSamples { horizon: usize },

    #[error("sequence too long: {len} > context {context}")]
    SequenceTooLong { len: usize, context: usize },

    #[error("action tensor shape mismatch: expected {expected}, got {got}")]
    ActionShapeMismatch { expected: usize, got: usize },

    #[error("divergence detected at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("normalization mismatch: model stats {model}, data stats {data}")]
    NormalizationMismatch { model: String, data: String },

    #[error("horizon out of range: t={t} + h={horizon} >= {len}")]
    HorizonOutOfRange { t: usize, horizon: usize, len: usize },

    #[error("no results found under {0}")]
    NoResultsFound(String),

    #[error("corrupt result file {path}: {detail}")]
    CorruptResult { path: String, detail: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("malformed file {path}: {detail}")]
    MalformedFile { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
