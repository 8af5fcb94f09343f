use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("empty token sequence")]
    EmptySequence,

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("position {index} out of range for sequence of length {len}")]
    PositionOutOfRange { index: usize, len: usize },

    #[error("position {0} is already quantized")]
    AlreadyQuantized(usize),

    #[error("position {0} is not quantized")]
    NotQuantized(usize),

    #[error("every position is already quantized")]
    FullyQuantized,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("label {label} out of range for {num_labels} labels")]
    LabelOutOfRange { label: usize, num_labels: usize },

    #[error("non-finite gradient entry at ({row}, {col})")]
    NonFiniteGradient { row: usize, col: usize },

    #[error("non-finite loss in round {round}, step {step}: {total}")]
    NonFiniteLoss { round: usize, step: usize, total: f64 },

    #[error("every zeroth-order sample produced a non-finite loss ({samples} samples)")]
    ZooAllSamplesSkipped { samples: usize },

    #[error("vocabulary has no embedding table but the similarity filter is active")]
    MissingEmbeddingTable,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::DimensionMismatch { expected: format!("{expected:?}"), actual: format!("{actual:?}") }
    }
}
