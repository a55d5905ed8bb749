use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("sequence length {len} exceeds max position embeddings {max}")]
    SequenceLength { len: usize, max: usize },

    #[error("length error: {0}")]
    Length(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown {kind} '{name}' (known: {known})")]
    Unknown {
        kind: &'static str,
        name: String,
        known: String,
    },

    #[error("head index {index} out of range 1..={n_heads}")]
    HeadIndex { index: usize, n_heads: usize },

    #[error("label {label} at t={t} out of range 0..{classes}")]
    Label { t: usize, label: usize, classes: usize },

    #[error("no gate entry for state v={v}, u={u}")]
    UnmappedState { v: usize, u: usize },

    #[error("empty subset: {0}")]
    EmptySubset(String),

    #[error("cosine similarity undefined for a zero vector")]
    ZeroVector,

    #[error("{path}: bad magic, expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: length inconsistency: {detail}")]
    LengthInconsistency { path: PathBuf, detail: String },

    #[error("SpO2 value {value} at t={t} outside [0, 100]")]
    Spo2Range { t: usize, value: f32 },

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("record too short: {duration_s} s < {quantum_s} s")]
    RecordTooShort { duration_s: u32, quantum_s: u32 },

    #[error("non-finite gradient in '{path}' at step {step}")]
    NonFiniteGradient { path: String, step: u64 },

    #[error("non-finite loss at epoch {epoch}, record {record}")]
    NonFiniteLoss { epoch: usize, record: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad input rather than a failed computation.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Unknown { .. }
                | Error::HashMismatch { .. }
                | Error::BadMagic { .. }
                | Error::Truncated { .. }
                | Error::LengthInconsistency { .. }
                | Error::Checkpoint(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
