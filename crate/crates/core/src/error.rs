use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible; the message names the offending dimension.
    #[error("{op}: {message}")]
    ShapeMismatch { op: &'static str, message: String },

    #[error("{op}: {message}")]
    InvalidInput { op: &'static str, message: String },

    #[error("backward called on a value that is not traced on this tape")]
    Untraced,

    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },

    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { what: String, iteration: u64 },

    #[error("checkpoint: bad magic bytes (not a checkpoint file)")]
    CheckpointBadMagic,

    #[error("checkpoint: unsupported format version {found} (this build reads {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint: truncated file while reading {context}")]
    CheckpointTruncated { context: &'static str },

    #[error("checkpoint: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    CheckpointChecksum { stored: u32, computed: u32 },

    #[error("checkpoint: {0}")]
    CheckpointFormat(String),

    #[error("config: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("png ({path}): {message}")]
    Png { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, message: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            message: message.into(),
        }
    }

    pub fn invalid(op: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidInput {
            op,
            message: message.into(),
        }
    }
}
