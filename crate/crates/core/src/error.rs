use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HatError>;

#[derive(Debug, Error)]
pub enum HatError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label {id} is not in the label alphabet (size {size})")]
    Vocabulary { id: usize, size: usize },

    #[error("enumeration too large: {what} = {size} exceeds cap {cap}")]
    EnumerationTooLarge { what: &'static str, size: usize, cap: usize },

    #[error("infeasible alignment: {0}")]
    Infeasible(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("decode failure: {0}")]
    DecodeFailure(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HatError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HatError::Io { path: path.into(), source }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            HatError::Config(_) | HatError::Argument(_) => 2,
            HatError::Parse { .. } => 3,
            HatError::Numeric(_) | HatError::DecodeFailure(_) | HatError::Infeasible(_) => 4,
            HatError::Io { .. } => 5,
            _ => 1,
        }
    }
}
