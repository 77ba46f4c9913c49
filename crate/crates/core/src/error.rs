use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid mask: {0}")]
    Mask(String),

    #[error("invalid image: {0}")]
    Image(String),

    #[error("{component} unavailable: {reason}")]
    BackendLoad { component: String, reason: String },

    #[error("backend error: {0}")]
    Backend(String),

    #[error("non-finite latent at step {step}")]
    NonFinite { step: usize },

    #[error("cancelled at step {step}")]
    Cancelled { step: usize },

    #[error("mask too small: no crop of sizes {sizes:?} fits inside the mask")]
    MaskTooSmall { sizes: Vec<usize> },

    #[error("{0}")]
    Invalid(String),

    #[error("perceptual weights unavailable: {0}")]
    PerceptualWeights(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    /// Whether this error came from loading or initializing a backend.
    pub fn is_backend_load(&self) -> bool {
        matches!(self, Error::BackendLoad { .. } | Error::PerceptualWeights(_))
    }
}
