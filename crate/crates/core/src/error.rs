use thiserror::Error;

use crate::SeqId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("zero-norm vector passed to cosine similarity")]
    ZeroNorm,
    #[error("tensor dimensions must be positive")]
    ZeroDimension,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("layer {layer} out of range 1..={n_layers}")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("evidence does not match exit technique {0}")]
    EvidenceMismatch(&'static str),

    #[error("kv pool exhausted: need {needed} blocks, {free} free")]
    OutOfMemory { needed: usize, free: usize },
    #[error("sequence {0} already allocated")]
    DuplicateSequence(SeqId),
    #[error("sequence {0} is not allocated")]
    UnknownSequence(SeqId),
    #[error("kv slot already written: seq {seq}, layer {layer}, position {position}")]
    Overwrite { seq: SeqId, layer: usize, position: usize },
    #[error("kv append out of order: seq {seq}, layer {layer}, position {position}, expected {expected}")]
    Gap {
        seq: SeqId,
        layer: usize,
        position: usize,
        expected: usize,
    },
    #[error("kv entries missing: seq {seq}, layer {layer} holds {have} positions, {wanted} requested")]
    MissingEntries {
        seq: SeqId,
        layer: usize,
        have: usize,
        wanted: usize,
    },

    #[error("request {0} cannot fit into an empty kv pool")]
    Unschedulable(SeqId),
    #[error("sequence {0} has not finished")]
    Unfinished(SeqId),
    #[error("arithmetic overflow in {0}")]
    Overflow(&'static str),

    #[error("trace line {line}: {message}")]
    Trace { line: u64, message: String },
    #[error("unsupported format `{0}`")]
    UnsupportedFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
