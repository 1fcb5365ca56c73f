use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("samples rejected (smaller than {min}x{min}): {}", ids.join(", "))]
    SampleRejected { min: usize, ids: Vec<String> },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("incompatible decoder: {0}")]
    Compatibility(String),

    #[error("missing dependency {path}: {what}")]
    Dependency { path: PathBuf, what: String },

    #[error("scoring failed for sample {id}: {source}")]
    Scoring {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// True for errors caused by bad inputs or configuration rather than by a
    /// failure while running. The CLI maps these to exit status 1.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Ingestion { .. }
            | Error::Manifest(_)
            | Error::SampleRejected { .. }
            | Error::Config(_)
            | Error::Shape(_)
            | Error::Domain(_)
            | Error::Protocol(_)
            | Error::Data(_)
            | Error::Dependency { .. } => true,
            Error::Scoring { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
