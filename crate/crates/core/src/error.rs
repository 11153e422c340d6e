use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (shape, dimension, emptiness).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged: non-finite loss in epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("refusing to mutate a frozen network")]
    MutationRefused,

    #[error("memory initialization starved: placed {placed} of {required} prototypes before the feature stream ran out (lower memory.capacity or raise memory.threshold)")]
    InitStarvation { placed: usize, required: usize },

    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("stage {stage} failed: {error}")]
    Stage { stage: &'static str, error: Box<Error> },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

/// Failures while decoding one of the binary artifact formats. Every variant
/// carries the byte offset at which decoding stopped.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("bad magic at offset {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: usize,
        expected: String,
        found: Vec<u8>,
    },

    #[error("unsupported version {found} at offset {offset} (expected {expected})")]
    Version {
        offset: usize,
        found: u32,
        expected: u32,
    },

    #[error("truncated {context} at offset {offset}: need {needed} bytes, {available} available")]
    Truncated {
        offset: usize,
        context: String,
        needed: usize,
        available: usize,
    },

    #[error("shape overflow in {context} at offset {offset}")]
    ShapeOverflow { offset: usize, context: String },

    #[error("invalid {context} at offset {offset}: {message}")]
    Invalid {
        offset: usize,
        context: String,
        message: String,
    },
}

impl ParseError {
    pub fn offset(&self) -> usize {
        match self {
            ParseError::BadMagic { offset, .. }
            | ParseError::Version { offset, .. }
            | ParseError::Truncated { offset, .. }
            | ParseError::ShapeOverflow { offset, .. }
            | ParseError::Invalid { offset, .. } => *offset,
        }
    }
}
