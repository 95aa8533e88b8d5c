use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite gradient in parameter tensor {tensor} at element {element} (value {value})")]
    NonFiniteGradient {
        tensor: usize,
        element: usize,
        value: f64,
    },

    #[error("training diverged at {stage}: non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence {
        stage: String,
        epoch: usize,
        batch: usize,
    },

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("checksum mismatch for {path}")]
    Checksum { path: PathBuf },

    #[error("missing file {path} (referenced by sample {sample_id})")]
    MissingFile { path: PathBuf, sample_id: u64 },

    #[error("corrupt data in {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("{count} sweep cell(s) failed")]
    PartialSweep { count: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the `mb` binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Divergence { .. } | Error::NonFiniteGradient { .. } => 4,
            Error::PartialSweep { .. } => 5,
            Error::VersionMismatch { .. }
            | Error::Checksum { .. }
            | Error::MissingFile { .. }
            | Error::Corrupt { .. }
            | Error::Io { .. }
            | Error::Csv(_)
            | Error::Json(_) => 3,
            Error::InvalidInput(_) | Error::Shape(_) => 3,
        }
    }
}
