use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid audio: {0}")]
    Audio(String),
    #[error("insufficient channels: got {0}, need at least 2")]
    InsufficientChannels(usize),
    #[error("sample rate mismatch: file has {found} Hz, expected {expected} Hz")]
    RateMismatch { found: f64, expected: f64 },
    #[error("invalid label table: {0}")]
    Labels(String),
    #[error("segment {index} at {time_s} s is outside label coverage")]
    OutsideLabelCoverage { index: usize, time_s: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
