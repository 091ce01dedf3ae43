use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value is outside the domain an operation accepts.
    #[error("argument error: {0}")]
    Argument(String),

    /// Optimizer or tape state is inconsistent with the request.
    #[error("state error: {0}")]
    State(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("unknown attribute `{name}`; valid names: {}", valid.join(", "))]
    UnknownAttribute { name: String, valid: Vec<String> },

    #[error("non-finite value in `{tensor}` at iteration {iteration}")]
    NonFinite { iteration: u64, tensor: String },

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("image error: {0}")]
    Image(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
}
