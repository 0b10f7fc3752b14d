//! One error type for the whole crate.
//!
//! Every variant carries a human-readable message; [`Error::kind`] exposes a
//! stable machine-readable tag so front ends (the CLI in particular) can
//! prefix errors uniformly without matching on variants.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or length disagreement between operands.
    #[error("{0}")]
    Dim(String),
    /// A value that must be finite is NaN or infinite.
    #[error("{0}")]
    Numeric(String),
    /// Invalid hyperparameter or option combination.
    #[error("{0}")]
    Config(String),
    /// An index (class label, target, element offset) is out of range.
    #[error("{0}")]
    Index(String),
    /// API misuse: detached loss tensor, checkpoint/config mismatch, empty
    /// training set, and similar broken preconditions.
    #[error("{0}")]
    Contract(String),
    /// Malformed on-disk container or checkpoint.
    #[error("{0}")]
    Format(String),
    /// Train/test split construction failure (e.g. class budget not met).
    #[error("{0}")]
    Split(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable lowercase tag for each error family.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dim(_) => "dim",
            Error::Numeric(_) => "numeric",
            Error::Config(_) => "config",
            Error::Index(_) => "index",
            Error::Contract(_) => "contract",
            Error::Format(_) => "format",
            Error::Split(_) => "split",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
