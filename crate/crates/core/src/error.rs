use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the attention math, positional encodings, the model and
/// the cache policies.
#[derive(Debug, Error)]
pub enum CormError {
    #[error("dimension mismatch at index {index}: expected {expected}, got {actual}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("length mismatch: {what} has {left} entries but {right} were expected")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("softmax of an empty weight vector")]
    EmptyInput,
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("rotary embedding needs an even head dimension, got {0}")]
    OddDimension(usize),
    #[error("causality violation: key position {key_pos} is after query position {query_pos}")]
    Causality { query_pos: usize, key_pos: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("token id {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("group shape mismatch: {0}")]
    GroupMismatch(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("weights file: {0}")]
    Weights(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Failures while reading, writing or recording an attention trace.
#[derive(Debug, Error)]
pub enum TraceError {
    #[error("bad magic bytes {found:?}, expected \"CORMTRC1\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported trace version {found}, this build reads version {supported}")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checksum mismatch in bytes {start}..{end}: {detail}")]
    Checksum {
        start: u64,
        end: u64,
        detail: String,
    },
    #[error("malformed trace: {0}")]
    Malformed(String),
    #[error("trace would need {required} bytes, which exceeds the cap of {cap} bytes")]
    TooLarge { required: u64, cap: u64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CormError> = std::result::Result<T, E>;

impl CormError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CormError::Io {
            path: path.into(),
            source,
        }
    }
}
