use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("empty signal")]
    EmptySignal,
    #[error("non-finite sample at index {0}")]
    NonFiniteSample(usize),
    #[error("invalid sample rate {0}")]
    InvalidSampleRate(u32),
    #[error("invalid STFT configuration: {0}")]
    InvalidStftConfig(String),
    #[error("signal of {len} samples is too short (need at least {min})")]
    TooShort { len: usize, min: usize },
    #[error("overlap-add denominator {value:e} below threshold at sample {index}")]
    ColaViolation { index: usize, value: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),
    #[error("SilentSource: source has zero energy")]
    SilentSource,
    #[error("unknown query {0:?}")]
    UnknownQuery(String),
    #[error("embedding file line {line}: {msg}")]
    EmbeddingFile { line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("duplicate corpus id {0:?}")]
    DuplicateId(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("report: {0}")]
    Report(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    IoBare(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
