use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("layer {layer}: {message}")]
    Layer { layer: usize, message: String },

    #[error("model: {0}")]
    Model(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("profile: {0}")]
    Profile(String),

    #[error("tensor format: {0}")]
    TensorFormat(String),

    #[error("config `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("search space of {size} partitions exceeds guard {guard}; reduce the layer or device count")]
    Guard { size: u128, guard: u128 },

    #[error("no feasible partition: {0}")]
    Infeasible(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
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

    pub(crate) fn layer(layer: usize, message: impl Into<String>) -> Self {
        Error::Layer {
            layer,
            message: message.into(),
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
