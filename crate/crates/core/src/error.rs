use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{}: duplicate id {id:?} on lines {first_line} and {second_line}", path.display())]
    DuplicateId {
        path: PathBuf,
        id: String,
        first_line: usize,
        second_line: usize,
    },

    #[error("malformed {kind} {}: {reason}", path.display())]
    Format {
        kind: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error("feature index {index} out of range for feature dimension {dim}")]
    FeatureOutOfRange { index: u32, dim: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite gradient in parameter block {block}")]
    NonFiniteGradient { block: &'static str },

    #[error("non-finite value in {stage} for query {query_id:?}")]
    NonFinite { stage: &'static str, query_id: String },

    #[error("query {0:?} has no tokens")]
    EmptyQuery(String),

    #[error("document {0:?} not found in collection")]
    MissingDocument(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("pipeline state: {0}")]
    State(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(kind: &'static str, path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            kind,
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Errors caused by bad user input (config, arguments, files) rather than
    /// by an internal failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::DuplicateId { .. }
                | Error::Format { .. }
                | Error::Invalid(_)
                | Error::EmptyQuery(_)
                | Error::MissingDocument(_)
                | Error::Io { .. }
        )
    }
}
