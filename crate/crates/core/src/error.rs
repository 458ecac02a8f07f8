use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context} at line {line}: {message}")]
    Parse {
        context: String,
        line: usize,
        message: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("empty vocabulary after pruning ({0})")]
    EmptyVocabulary(String),

    #[error("corpus too small: {0}")]
    CorpusTooSmall(String),

    #[error("unknown label {label:?} in {context}")]
    UnknownLabel { label: String, context: String },

    #[error("document {doc} cannot be represented: {reason}")]
    Unrepresentable { doc: String, reason: String },

    #[error("non-finite value in {location}")]
    NonFinite { location: String },

    #[error("gradient error at {op}: {detail}")]
    Detached { op: &'static str, detail: String },

    #[error("model variant {variant} does not support {what}")]
    Unsupported { variant: String, what: String },

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::EmptyVocabulary(_) => "empty_vocabulary",
            Error::CorpusTooSmall(_) => "corpus_too_small",
            Error::UnknownLabel { .. } => "unknown_label",
            Error::Unrepresentable { .. } => "unrepresentable_document",
            Error::NonFinite { .. } => "non_finite",
            Error::Detached { .. } => "detached",
            Error::Unsupported { .. } => "unsupported",
            Error::Config(_) => "config",
        }
    }
}
