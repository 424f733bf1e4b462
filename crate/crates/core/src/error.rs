use std::path::PathBuf;

/// Crate-wide error type.
///
/// Variants are grouped by failure class so the CLI can map them onto exit
/// codes (see [`Error::class`]).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic in {0}")]
    BadMagic(PathBuf),
    #[error("unsupported store version {found} (expected {expected})")]
    VersionMismatch { found: u8, expected: u8 },
    #[error("unsupported dtype {0}")]
    UnsupportedDtype(u8),
    #[error("truncated payload: header declares {declared} bytes, file has {actual}")]
    TruncatedPayload { declared: u64, actual: u64 },
    #[error("non-finite value at row {row}")]
    NonFinite { row: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("k exceeds candidate count (k={k}, count={count})")]
    KExceedsCount { k: usize, count: usize },
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite gradient in parameter block {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error("remote encoder: connection failed: {0}")]
    RemoteConnection(String),
    #[error("remote encoder: timeout: {0}")]
    RemoteTimeout(String),
    #[error("remote encoder: malformed response: {0}")]
    RemoteMalformed(String),
    #[error("remote encoder: dimension mismatch: expected {expected}, actual {actual}")]
    RemoteDimMismatch { expected: usize, actual: usize },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("round {round}: {source}")]
    InRound {
        round: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("phase {phase} failed: {source}")]
    Phase {
        phase: String,
        #[source]
        source: Box<Error>,
    },
}

/// Coarse failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
    Remote,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numeric => 4,
            ErrorClass::Remote => 5,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            Config(_) | InvalidArgument(_) => ErrorClass::Config,
            NonFiniteGradient(_) | NonFiniteLoss(_) => ErrorClass::Numeric,
            RemoteConnection(_)
            | RemoteTimeout(_)
            | RemoteMalformed(_)
            | RemoteDimMismatch { .. } => ErrorClass::Remote,
            InRound { source, .. } | Phase { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
