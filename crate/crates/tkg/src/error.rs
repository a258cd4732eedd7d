use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by the library. The CLI maps these onto exit codes:
/// usage/config -> 1, data -> 2, numerical -> 3.
#[derive(Error, Debug)]
pub enum TkgError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, TkgError>;
