use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] splatrig::Error),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: splatrig::Error,
    },

    #[error("document has no {section} section")]
    MissingSection { section: &'static str, hint: String },

    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// A suggested next step, when one is known.
    pub fn hint(&self) -> Option<&str> {
        match self {
            CliError::MissingSection { hint, .. } => Some(hint),
            _ => None,
        }
    }

    pub(crate) fn missing(section: &'static str, hint: impl Into<String>) -> Self {
        CliError::MissingSection {
            section,
            hint: hint.into(),
        }
    }
}
