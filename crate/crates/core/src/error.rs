use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("invalid specification: {0}")]
    Spec(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("ensemble member with seed {seed} failed: {source}")]
    MemberFailed {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid probability distribution: {0}")]
    Distribution(String),

    #[error("class {class} has {count} samples, need at least {needed}")]
    InsufficientData {
        class: usize,
        count: usize,
        needed: usize,
    },

    #[error("normalization cell rho[{src}][{target}] is not positive ({value})")]
    Normalization { src: usize, target: usize, value: f64 },

    #[error("empty report input")]
    EmptyReport,

    #[error("corrupt file {path}: {detail}")]
    CorruptFile { path: PathBuf, detail: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing prerequisite {artifact}; run `{command}` first")]
    MissingPrerequisite { artifact: String, command: String },

    #[error("experiment directory is locked: {0}")]
    Locked(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that originate in non-finite arithmetic during optimization.
    pub fn is_divergence(&self) -> bool {
        match self {
            Error::Divergence { .. } | Error::Numeric(_) => true,
            Error::MemberFailed { source, .. } => source.is_divergence(),
            _ => false,
        }
    }
}
