use std::path::PathBuf;

/// Errors produced by the layerdiff library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("mask overlap: foreground masks sum to {sum} at pixel ({y}, {x})")]
    Overlap { y: usize, x: usize, sum: f32 },

    #[error("mask is not binary: value {value} at pixel ({y}, {x})")]
    NonBinaryMask { y: usize, x: usize, value: f32 },

    #[error("layer set invalid: {0}")]
    InvalidLayerSet(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("dataset record {id}: {reason}")]
    Dataset { id: String, reason: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad caller input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape(_)
                | Error::Invalid(_)
                | Error::Overlap { .. }
                | Error::NonBinaryMask { .. }
                | Error::InvalidLayerSet(_)
                | Error::Dataset { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
