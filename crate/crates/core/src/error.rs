use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // feature store
    #[error("record `{id}` has length {got}, store dim is {expected}")]
    DimensionMismatch { id: String, expected: usize, got: usize },
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("record `{id}` has a non-finite value at component {index}")]
    NonFiniteValue { id: String, index: usize },
    #[error("{path}: bad magic {found:?}")]
    BadMagic { path: PathBuf, found: [u8; 8] },
    #[error("{path}: unsupported version {found}")]
    VersionUnsupported { path: PathBuf, found: u32 },
    #[error("{path}: truncated file ({actual} bytes, header implies at least {expected})")]
    TruncatedFile { path: PathBuf, expected: u64, actual: u64 },
    #[error("{path}: corrupt store: {reason}")]
    CorruptStore { path: PathBuf, reason: String },
    #[error("unresolved id `{id}` in {store} store")]
    UnresolvedId { id: String, store: &'static str },
    #[error("image `{0}` has no caption ids")]
    EmptyCaptionList(String),
    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },

    // projection network
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("train-mode forward needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("stale cache: {0}")]
    StaleCache(String),

    // contrastive
    #[error("row {0} has zero norm")]
    ZeroVector(usize),
    #[error("embedding batch is not normalized")]
    NotNormalized,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTau(f64),

    // optimizer
    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(usize),

    // trainer
    #[error("dataset too small: {0}")]
    TooSmall(String),
    #[error("batch size {batch_size} exceeds {available} available images")]
    BatchExceedsDataset { batch_size: usize, available: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("non-finite loss at step {step}: {diagnostics}")]
    NonFiniteLoss { step: u64, diagnostics: String },

    // class representations / evaluation
    #[error("template `{0}` must contain exactly one `{{}}` placeholder")]
    BadTemplate(String),
    #[error("empty input")]
    EmptyInput,
    #[error("missing embeddings for {} id(s): {}", .0.len(), .0.join(", "))]
    MissingEmbedding(Vec<String>),
    #[error("class `{0}` has labels but no samples")]
    EmptyClass(String),
    #[error("K={k} exceeds corpus size {corpus}")]
    KExceedsCorpus { k: usize, corpus: usize },

    // viterb
    #[error("classes in both seen and unseen sets: {}", .0.join(", "))]
    OverlapDetected(Vec<String>),
    #[error("count mismatch: {0}")]
    CountMismatch(String),
    #[error("unseen-class data reached training: {0}")]
    LeakDetected(String),
    #[error("missing dataset result(s): {}", .0.join(", "))]
    MissingDataset(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
