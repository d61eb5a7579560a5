//! Error types shared across the library.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DueError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("parse error in {file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("stiffness failure: {0}")]
    Stiffness(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DueError>;

impl DueError {
    /// Process exit code for the CLI: 2 config, 3 data, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            DueError::Config(_) | DueError::Contract(_) => 2,
            DueError::Parse { .. }
            | DueError::Io(_)
            | DueError::InsufficientData(_)
            | DueError::Dimension(_)
            | DueError::Domain(_) => 3,
            DueError::Divergence(_) | DueError::Numeric(_) | DueError::Stiffness(_) => 4,
        }
    }
}
