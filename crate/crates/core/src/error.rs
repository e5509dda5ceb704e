use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("utterance shorter than one frame: {samples} samples < window of {window}")]
    TooShort { samples: usize, window: usize },

    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),

    #[error("unsupported wav format: {0}")]
    WavFormat(String),

    #[error("segment [{start:.3}, {end:.3}] s outside waveform of {duration:.3} s")]
    SegmentBounds { start: f64, end: f64, duration: f64 },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    InvalidTokenId { id: u32, size: usize },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("{op}: {msg}")]
    Op { op: &'static str, msg: String },

    #[error("invalid model config: {0}")]
    ModelConfig(String),

    #[error("checkpoint format version {found} not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint header could not be parsed: {0}")]
    CheckpointHeader(String),

    #[error("checkpoint truncated: need {needed} bytes, file has {available}")]
    CheckpointTruncated { needed: u64, available: u64 },

    #[error("tensor `{name}` has shape {found:?}, config expects {expected:?}")]
    ParamShape { name: String, found: Vec<usize>, expected: Vec<usize> },

    #[error("missing tensor `{0}`")]
    MissingParam(String),

    #[error("unexpected tensor `{0}`")]
    UnexpectedParam(String),

    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),

    #[error("sample `{id}` of size {size} exceeds batch cap {cap}")]
    Oversize { id: String, size: usize, cap: usize },

    #[error("unknown source tag `{0}`")]
    UnknownTag(String),

    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    #[error("invalid decode config: {0}")]
    DecodeConfig(String),

    #[error("{0}")]
    Metric(String),

    #[error("line count mismatch: {hyp} hypothesis lines vs {reference} reference lines")]
    Misaligned { hyp: usize, reference: usize },

    #[error("config {}: {msg}", path.display())]
    Config { path: PathBuf, msg: String },

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("cannot read audio {path}: {msg}")]
    Audio { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
