use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised while decoding a packed model file.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected \"DABN\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed model: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of bounds")]
    IndexOutOfBounds,
    #[error("invalid group width {0}: must be a positive multiple of 8")]
    InvalidGroupWidth(usize),
    #[error("bit vector width mismatch: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("kernel larger than padded input")]
    KernelTooLarge,
    #[error("reduction overflow: {vectors} accumulated vectors exceed lane capacity {capacity}")]
    ReductionOverflow { vectors: usize, capacity: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("node '{node}': {source}")]
    Node {
        node: String,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("node '{node}': unknown op '{op}'")]
    UnknownOp { node: String, op: String },
    #[error("{context}: unresolved name '{name}'")]
    UnresolvedName { context: String, name: String },
    #[error("graph contains a cycle through node '{0}'")]
    Cycle(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn at_node(self, node: &str) -> Self {
        match self {
            e @ Error::Node { .. } => e,
            e => Error::Node {
                node: node.to_string(),
                source: Box::new(e),
            },
        }
    }

    /// Strip node attribution, returning the underlying error.
    pub fn root(&self) -> &Error {
        match self {
            Error::Node { source, .. } => source.root(),
            e => e,
        }
    }
}
