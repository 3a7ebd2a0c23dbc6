use std::path::PathBuf;

/// Errors produced anywhere in the core crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid sample {sample_id}: {reason}")]
    InvalidSample { sample_id: String, reason: String },
    #[error("length mismatch in {file}: expected {expected} bytes, found {found}")]
    LengthMismatch {
        file: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("channel {channel} has zero variance")]
    ZeroVariance { channel: usize },
    #[error("empty manifest")]
    EmptyManifest,
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("anchor {0} has no neighbor within 1 degree")]
    NoNeighbor(usize),
    #[error("every anchor candidate lacks neighbors")]
    NoNeighborExhausted,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("unknown encoder variant {0:?}")]
    UnknownVariant(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("all pixels carry the ignore label")]
    AllIgnored,
    #[error("empty split: {0}")]
    EmptySplit(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
