use std::path::PathBuf;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value violates its documented range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An operation received an argument outside its precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two objects that must share a shape do not.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A token id outside `[0, n_vocab)`.
    #[error("token {token} out of range for vocabulary of size {n_vocab}")]
    TokenOutOfRange { token: usize, n_vocab: usize },

    /// The pipeline produced no usable preference pairs.
    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    /// A theory or acceptance check failed.
    #[error("verification failed: {0}")]
    Verification(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its content does not match the expected format.
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    /// Process exit status associated with this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::Verification(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
