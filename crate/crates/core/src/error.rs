use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors surfaced by tensor ops, the tape, the model, and the samplers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {detail}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },

    #[error("softmax: fully masked row {row}")]
    FullyMaskedRow { row: usize },

    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("{what} = {value} is out of range: {detail}")]
    InvalidValue {
        what: &'static str,
        value: f64,
        detail: &'static str,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("tensors belong to different tapes")]
    TapeMismatch,

    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward: loss is detached from the tape")]
    DetachedLoss,

    #[error("adapter {slot}: dimension mismatch ({detail})")]
    AdapterMismatch { slot: String, detail: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged {
        step: usize,
        loss: f64,
        trace: Vec<f64>,
    },

    #[error("sampler: non-finite state at step {step}")]
    NonFiniteState { step: usize },

    #[error("kv cache: {0}")]
    Cache(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
