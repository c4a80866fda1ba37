//! Error type shared by every module of the crate.

use std::path::PathBuf;

use crate::graph_store::GlobalNodeIndex;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// The anchor has neither first-hop nor high-order neighbors.
    #[error("node {0} has an empty positive pool")]
    EmptyPool(GlobalNodeIndex),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input (as opposed to runtime failures).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation(_)
                | Error::OutOfRange(_)
                | Error::Config(_)
                | Error::EmptyPool(_)
                | Error::Format(_)
                | Error::Json(_)
        )
    }
}
