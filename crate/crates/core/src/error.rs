use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("malformed WAV header in {path}: {reason}")]
    MalformedWav { path: PathBuf, reason: String },

    #[error("unsupported WAV encoding in {path}: {reason}")]
    UnsupportedEncoding { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("signal is empty")]
    EmptySignal,

    #[error("non-finite sample at index {0}")]
    NonFinite(usize),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("sample rate mismatch: expected {expected} Hz, got {actual} Hz")]
    RateMismatch { expected: u32, actual: u32 },

    #[error("reference signal has zero energy")]
    ZeroEnergy,

    #[error("embedding has zero norm")]
    ZeroNorm,

    #[error("input too short: need at least {needed} samples, got {actual}")]
    TooShort { needed: usize, actual: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(
        "epsilon mismatch: checkpoint was trained with {checkpoint}, caller supplied {requested}"
    )]
    EpsilonMismatch { checkpoint: f64, requested: f64 },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("trial list error: {0}")]
    Trials(String),

    #[error("score set needs at least one target and one nontarget score")]
    DegenerateScores,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: non-finite loss at step {step}")]
    Divergence { step: usize },

    #[error("backend failure: {0}")]
    Backend(String),

    #[error("no values left after excluding {excluded} undefined entries")]
    NoValues { excluded: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }
}
