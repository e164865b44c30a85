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

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid taxonomy ({location}): {msg}")]
    Taxonomy { location: String, msg: String },

    #[error("invalid label: {0}")]
    InvalidLabel(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("word vectors: {0}")]
    WordVectors(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image error on {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite {
        epoch: usize,
        step: usize,
        detail: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used by the CLI for machine-readable errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Taxonomy { .. } => "taxonomy",
            Error::InvalidLabel(_) => "label",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::WordVectors(_) => "word_vectors",
            Error::Metric(_) => "metric",
            Error::Dataset(_) => "dataset",
            Error::Checkpoint(_) => "checkpoint",
            Error::Image { .. } => "image",
            Error::NonFinite { .. } => "non_finite",
        }
    }
}
