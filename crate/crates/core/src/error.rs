use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CkmlError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed or out-of-range input data. `line` is 1-based when known.
    #[error("{message}{}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Data { message: String, line: Option<usize> },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("incompatible: {0}")]
    Compat(String),

    #[error("shape mismatch: {0}")]
    Shape(String),
}

impl CkmlError {
    pub fn data(message: impl Into<String>) -> Self {
        CkmlError::Data {
            message: message.into(),
            line: None,
        }
    }

    pub fn data_at(message: impl Into<String>, line: usize) -> Self {
        CkmlError::Data {
            message: message.into(),
            line: Some(line),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CkmlError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            CkmlError::Numeric(_) => 1,
            CkmlError::Compat(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CkmlError>;
