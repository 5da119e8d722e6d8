use std::path::Path;

/// Crate-wide error type.
///
/// Variants map onto the CLI exit codes: `Validation` → 2, `Backend` → 3,
/// everything else (parse, data, IO) → 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Configuration or precondition violations, detected before side effects.
    #[error("validation error: {0}")]
    Validation(String),

    /// Malformed or inconsistent data discovered while processing.
    #[error("data error: {0}")]
    Data(String),

    /// A parse failure tied to a specific file and line.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// Completion backend failure after retry handling.
    #[error("backend error after {attempts} attempt(s) (retriable: {retriable}): {message}")]
    Backend {
        message: String,
        retriable: bool,
        attempts: u32,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn parse(path: &Path, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.display().to_string(),
            line,
            message: msg.into(),
        }
    }

    /// Exit code for the CLI contract (0 success, 2 validation, 3 backend, 4 data).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) => 2,
            Error::Backend { .. } => 3,
            _ => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
