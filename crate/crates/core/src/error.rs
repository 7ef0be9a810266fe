use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty clip")]
    EmptyClip,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("clip too short: {samples} samples, need at least {required}")]
    ClipTooShort { samples: usize, required: usize },

    #[error("too few frames: {frames}, need at least {required}")]
    TooFewFrames { frames: usize, required: usize },

    #[error("sample rate mismatch: codec expects {expected} Hz, got {actual} Hz")]
    SampleRateMismatch { expected: u32, actual: u32 },

    #[error("code {code} out of range for vocabulary of {vocab}")]
    CodeOutOfRange { code: u32, vocab: usize },

    #[error("empty code sequence")]
    EmptyCodes,

    #[error("input of {len} tokens exceeds context of {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("{stage} diverged at step {step}: {detail}")]
    Diverged {
        stage: &'static str,
        step: usize,
        detail: String,
    },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("targets have zero variance")]
    ZeroVariance,

    #[error("no valid tag: every column has a single class")]
    NoValidTag,

    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("every grid configuration failed")]
    AllConfigsFailed,

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Config(e.to_string())
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Error::Config(e.to_string())
    }
}
