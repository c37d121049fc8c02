use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("capacity exceeded: sequence of {len} tokens, model holds at most {max}")]
    Capacity { len: usize, max: usize },

    #[error("token id {token} outside vocabulary of size {vocab}")]
    Vocab { token: usize, vocab: usize },

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("all {0} runs failed")]
    AllRunsFailed(usize),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command line tool.
    ///
    /// 1 contract/config errors, 2 numeric failures, 3 when every run of a
    /// sweep failed.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) | Error::Degenerate(_) | Error::Calibration(_) => 2,
            Error::AllRunsFailed(_) => 3,
            _ => 1,
        }
    }
}
