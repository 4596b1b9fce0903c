use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is inconsistent with the data it is applied to.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numeric argument falls outside its legal range.
    #[error("{name} = {value} is out of range ({expected})")]
    Range {
        name: &'static str,
        value: f64,
        expected: &'static str,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A corpus manifest violates one of its invariants.
    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// An operation needs state (recorded gradients, a forward pass) that is not there.
    #[error("invalid state: {0}")]
    State(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn range(name: &'static str, value: f64, expected: &'static str) -> Self {
        Error::Range {
            name,
            value,
            expected,
        }
    }
}
