use thiserror::Error;

/// Errors produced anywhere in the simulator core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value produced")]
    NumericOverflow { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("variable is not a leaf of this tape")]
    UnknownLeaf,

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("no owned classes")]
    NoOwnedClasses,

    #[error("empty set")]
    EmptySet,

    #[error("class {0} is absent")]
    AbsentClass(usize),

    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("truncated file: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("io error: {0}")]
    Io(String),

    #[error("client {client} failed: {source}")]
    Client { client: usize, source: Box<Error> },
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}
