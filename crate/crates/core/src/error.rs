use thiserror::Error;

use crate::cost::SharingMode;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty dispatch")]
    EmptyDispatch,

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid convolution: {0}")]
    InvalidConv(String),

    #[error("invalid device profile: {0}")]
    InvalidDevice(String),

    #[error("invalid config at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("exclusive requires single tenant (got {0})")]
    ExclusiveRequiresSingleTenant(usize),

    #[error("out of device memory: {mode} needs {required} bytes, capacity {capacity} bytes")]
    OutOfMemory {
        mode: SharingMode,
        required: u64,
        capacity: u64,
    },

    #[error("duplicate request id {0}")]
    DuplicateRequest(u64),

    #[error("unknown tenant {0}")]
    UnknownTenant(u32),

    #[error("tenant {0} already evicted")]
    AlreadyEvicted(u32),

    #[error("no completions in window")]
    NoCompletions,

    #[error("missing cell: {0}")]
    MissingCell(String),

    #[error("missing exclusive baseline: {0}")]
    MissingBaseline(String),

    #[error("unsupported oracle config: {0}")]
    UnsupportedOracle(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("csv: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Error {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable class used by the CLI reason prefix.
    pub fn class(&self) -> &'static str {
        match self {
            Error::OutOfMemory { .. } => "oom",
            Error::Config { .. }
            | Error::InvalidShape(_)
            | Error::InvalidConv(_)
            | Error::InvalidDevice(_)
            | Error::ExclusiveRequiresSingleTenant(_)
            | Error::UnknownPreset(_)
            | Error::UnknownTenant(_)
            | Error::Json(_) => "config",
            Error::MissingCell(_) | Error::MissingBaseline(_) | Error::Csv(_) => "input",
            Error::Io(_) => "io",
            _ => "internal",
        }
    }
}
