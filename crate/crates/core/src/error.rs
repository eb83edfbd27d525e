use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty tensor has no scale")]
    EmptyTensor,

    #[error("non-finite input")]
    NonFinite,

    #[error("bit width {0} outside 2..=32")]
    BitWidth(u32),

    #[error("code {code} out of range for {bits}-bit format")]
    CodeRange { code: i64, bits: u32 },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("internal accumulator overflow in {0}; shapes or bit widths exceed the simulator envelope")]
    AccumulatorOverflow(&'static str),

    #[error("{path}: {msg} at byte offset {offset}")]
    Idx { path: PathBuf, offset: u64, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} (epoch {epoch})")]
    Diverged { step: u64, epoch: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
