use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ProbeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("bad magic in {0}: expected HSTORE01")]
    BadMagic(PathBuf),

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("record {id}: payload truncated (needs bytes up to {end}, file has {file_len})")]
    Truncated { id: String, end: u64, file_len: u64 },

    #[error("record {id}: offset {offset} out of range")]
    OffsetOutOfRange { id: String, offset: u64 },

    #[error("duplicate record id {0}")]
    DuplicateId(String),

    #[error("unknown record id {0}")]
    UnknownRecord(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("no valid positions: {0}")]
    EmptyMask(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),
}

impl ProbeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ProbeError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        ProbeError::Json {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            ProbeError::NonFinite(_) | ProbeError::Diverged { .. } | ProbeError::UndefinedMetric(_)
        )
    }
}
