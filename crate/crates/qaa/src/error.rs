//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {layer}: expected {expected}, got {got}")]
    ShapeMismatch {
        layer: String,
        expected: String,
        got: String,
    },

    #[error("numeric fault in {context}: non-finite value")]
    NumericFault { context: String },

    #[error("invalid quantization parameters: {0}")]
    InvalidQuantParams(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model cannot run the requested quantization state: {0}")]
    UnsupportedState(String),

    #[error("gradient check rejected: {0}")]
    GradCheckRejected(String),

    #[error("evaluation point too close to a non-smooth region: {0}")]
    TooCloseToKink(String),

    #[error("training diverged: {0}")]
    DivergedTraining(String),

    #[error("undefined feature divergence: clean feature norm is zero")]
    UndefinedDivergence,

    #[error("undefined gradient similarity: zero gradient on every example")]
    UndefinedSimilarity,

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("format error in {path} at offset {offset}: {message}")]
    Format {
        path: String,
        offset: u64,
        message: String,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch in {0}")]
    Checksum(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code convention: 1 for validation failures, 2 for
    /// runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidQuantParams(_)
            | Error::InvalidArgument(_)
            | Error::Config(_)
            | Error::Version { .. }
            | Error::Json(_) => 1,
            _ => 2,
        }
    }
}
