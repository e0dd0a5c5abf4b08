use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("zero-norm vector in {context} at index {index}")]
    ZeroNorm { context: &'static str, index: usize },

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value in {context} at coordinate {coordinate}")]
    NonFinite {
        context: &'static str,
        coordinate: usize,
    },

    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    #[error("invalid configuration: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("index out of range in {context}: {index} >= {bound}")]
    OutOfRange {
        context: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Failures while decoding a corpus or checkpoint file.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },

    #[error("file truncated: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },

    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),

    #[error("malformed metadata: {0}")]
    Metadata(String),

    #[error("invariant violated: {0}")]
    InvariantViolation(String),
}

/// Coarse failure classes, used by the command-line tool for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn invalid_config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidConfig { .. } => ErrorClass::Usage,
            Error::Format(_) | Error::Io { .. } | Error::Insufficient(_) => ErrorClass::Data,
            Error::DimensionMismatch { .. } | Error::OutOfRange { .. } => ErrorClass::Data,
            Error::ZeroNorm { .. }
            | Error::EmptyInput(_)
            | Error::NonFinite { .. }
            | Error::DegenerateWeights(_) => ErrorClass::Numerical,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
