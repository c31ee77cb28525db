use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("training diverged: {0}")]
    Training(String),
    #[error("policy error: {0}")]
    Policy(String),
    #[error("embedding version mismatch: records at {records}, stack at {stack}")]
    Coherence { records: u64, stack: u64 },
    #[error("bad file format: {0}")]
    Format(String),
    #[error("environment fault: {0}")]
    Env(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::Shape {
            context,
            expected,
            actual,
        }
    }
}

/// Fails with a shape error unless `actual == expected`.
pub(crate) fn check_width(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::shape(context, expected, actual))
    }
}
