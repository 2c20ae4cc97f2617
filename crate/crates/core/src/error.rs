use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input outside the mathematical domain of an operation (NaN, zero cardinality, ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("index {index} out of range (limit {limit})")]
    Index { index: u64, limit: u64 },

    /// A table (or bank) would exceed the materialization limits.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("compile error: {0}")]
    Compile(String),

    /// Violated precondition between plan-building operations.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("run error: {0}")]
    Run(String),

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("checksum mismatch")]
    Checksum,

    #[error("unsupported version {0}")]
    Version(u32),

    #[error("training error: {0}")]
    Training(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(offset: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }
}
