use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: record {record}: {reason}")]
    Malformed {
        path: PathBuf,
        record: u64,
        reason: String,
    },

    #[error("caption '{caption_id}' references unknown image '{image_id}'")]
    UnknownImage {
        caption_id: String,
        image_id: String,
    },

    #[error("image '{0}' has no captions")]
    ImageWithoutCaptions(String),

    #[error("duplicate {kind} id '{id}'")]
    DuplicateId { kind: &'static str, id: String },

    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("unknown caption id '{0}'")]
    UnknownCaption(String),

    #[error("image '{image_id}' has {count} caption(s); at least 2 are required to rank siblings")]
    TooFewSiblings { image_id: String, count: usize },

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid instance '{instance_id}': {reason}")]
    InvalidInstance { instance_id: String, reason: String },

    #[error("bad {format} file: {reason}")]
    BadFormat {
        format: &'static str,
        reason: String,
    },

    #[error("linear system is singular")]
    Singular,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
