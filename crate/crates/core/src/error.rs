use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class `{class}` has too few patients: {found} (need at least {required})")]
    TooFewPatients {
        class: String,
        found: usize,
        required: usize,
    },

    #[error("episode infeasible for class `{class}`: {reason}")]
    InfeasibleClass { class: String, reason: String },

    #[error("probability row {row} sums to {sum} (expected 1)")]
    NotAProbability { row: usize, sum: f64 },

    #[error("non-finite loss {loss} at episode {episode}")]
    NonFiniteLoss { episode: usize, loss: f64 },

    #[error("image is entirely background")]
    EmptyImage,

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("manifest error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
