use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures decoding the FSV1 volume format or the FSPM checkpoint format.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("truncated {what}")]
    Truncated { what: &'static str },
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("unknown volume kind code {0}")]
    UnknownKind(u8),
    #[error("bad rank {0}, volumes must be rank 3")]
    BadRank(u8),
    #[error("dtype {dtype} does not match kind {kind}")]
    KindMismatch { dtype: u8, kind: u8 },
    #[error("extents {0:?} overflow the addressable size")]
    DimOverflow(Vec<u32>),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("invalid voxel value: {0}")]
    InvalidValue(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("corrupt tensor table: {0}")]
    CorruptTable(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("episode sampling failed: {0}")]
    Sampling(String),
    #[error("phantom generation failed: {0}")]
    Phantom(String),
    #[error("class {0} is missing from the prototype registry")]
    MissingClass(u32),
    #[error("no gradient for parameter {0}")]
    MissingGrad(String),
    #[error("non-finite {tensor} at episode {episode}")]
    Diverged { episode: u64, tensor: String },
    #[error("{0}")]
    Invalid(String),
}

/// Coarse failure categories, used for process exit codes and FFI status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Format(_)
            | Error::Io { .. }
            | Error::Shape { .. }
            | Error::Sampling(_)
            | Error::Phantom(_)
            | Error::MissingClass(_) => ErrorKind::Data,
            Error::NonFinite { .. } | Error::Diverged { .. } => ErrorKind::Numeric,
            Error::Config(_) | Error::MissingGrad(_) | Error::Invalid(_) => ErrorKind::Usage,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
