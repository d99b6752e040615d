use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("signal too short: {len} samples, need at least {min}")]
    SignalTooShort { len: usize, min: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("feature kind mismatch: expected {expected}, got {actual}")]
    KindMismatch {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("window normalization is zero at {0} output samples")]
    ZeroWindowSum(usize),

    #[error("signal has no non-silent frames")]
    Silent,

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("every attack trial diverged: {0}")]
    AttackFailed(String),

    #[error("unsupported wav format in {path}: {reason}")]
    UnsupportedWav { path: PathBuf, reason: String },

    #[error("wav decode error: {0}")]
    Wav(#[from] hound::Error),

    #[error("missing word directories under {root}: {missing:?}")]
    MissingWords { root: PathBuf, missing: Vec<String> },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable identifier, used in report rows and CLI error lines.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::SignalTooShort { .. } => "signal_too_short",
            Error::Shape { .. } => "shape",
            Error::Config(_) => "config",
            Error::NonFinite(_) => "non_finite",
            Error::KindMismatch { .. } => "kind_mismatch",
            Error::ZeroWindowSum(_) => "zero_window_sum",
            Error::Silent => "silent",
            Error::ZeroNorm => "zero_norm",
            Error::AttackFailed(_) => "attack_failed",
            Error::UnsupportedWav { .. } => "unsupported_wav",
            Error::Wav(_) => "wav",
            Error::MissingWords { .. } => "missing_words",
            Error::Format(_) => "format",
            Error::Csv(_) => "csv",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
