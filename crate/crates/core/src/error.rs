use std::fmt;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Ways a serialized artifact can be malformed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FormatError {
    BadMagic([u8; 4]),
    UnsupportedVersion(u32),
    UnknownKind(u32),
    Truncated { expected: usize, actual: usize },
    TrailingBytes(usize),
    NonFinite,
    Manifest(String),
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormatError::BadMagic(m) => write!(f, "bad magic {:?}", m),
            FormatError::UnsupportedVersion(v) => write!(f, "unsupported version {}", v),
            FormatError::UnknownKind(k) => write!(f, "unknown payload kind {}", k),
            FormatError::Truncated { expected, actual } => {
                write!(f, "truncated: expected {} bytes, found {}", expected, actual)
            }
            FormatError::TrailingBytes(n) => write!(f, "{} unexpected trailing bytes", n),
            FormatError::NonFinite => write!(f, "non-finite value in payload"),
            FormatError::Manifest(msg) => write!(f, "manifest: {}", msg),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("format error: {0}")]
    Format(FormatError),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<FormatError> for Error {
    fn from(e: FormatError) -> Self {
        Error::Format(e)
    }
}

impl Error {
    /// Process exit code used by the command-line tool: 1 usage, 2 data/format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::InvalidData(_)
            | Error::Shape(_)
            | Error::Format(_)
            | Error::Io(_)
            | Error::Json(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}

pub(crate) fn invalid_arg(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn invalid_data(msg: impl Into<String>) -> Error {
    Error::InvalidData(msg.into())
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
