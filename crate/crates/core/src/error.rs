//! Crate-wide error type and exit-code mapping for the CLI.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl Error {
    /// Process exit code for the CLI. Failure classes are disjoint:
    /// 2 = configuration/schema, 3 = data/format/io, 4 = divergence,
    /// 1 = everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Format(_) | Error::Io(_) => 3,
            Error::Diverged { .. } => 4,
            Error::Shape(_) | Error::GradCheck(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
