use std::path::PathBuf;

/// Errors produced by every stage of the pipeline.
///
/// Variants are grouped by the exit code the CLI maps them to: validation
/// problems (2), numerical failures (3) and I/O (4).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("degenerate reference: {0}")]
    DegenerateReference(String),
    #[error("solver blow-up: {0}")]
    BlowUp(String),
    #[error("stability condition violated: {0}")]
    Stability(String),
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invalid(_)
            | Error::Shape(_)
            | Error::Config(_)
            | Error::DegenerateReference(_)
            | Error::Stability(_)
            | Error::Version { .. } => 2,
            Error::NonFinite(_) | Error::BlowUp(_) => 3,
            Error::Corrupt { .. } | Error::Io { .. } => 4,
        }
    }
}

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(format!($($arg)*)))
    };
}
pub(crate) use bail;
