use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("{op}: expected shape {expected:?}, got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("{op}: {axis} size {size} is not divisible by {factor}")]
    NotDivisible {
        op: &'static str,
        axis: &'static str,
        size: usize,
        factor: usize,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("unknown variant id `{0}` (expected one of full, a, b, c, d, e, cascaded, no_sr_branch)")]
    UnknownVariant(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("checkpoint {}: {msg}", path.display())]
    Checkpoint { path: PathBuf, msg: String },

    #[error("checkpoint config does not match the requested model: {}", .0.join(", "))]
    ConfigMismatch(Vec<String>),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(
        "non-finite loss at step {step} (lr {lr:e}): loss_main={loss_main}, loss_sr={loss_sr}"
    )]
    NonFiniteLoss {
        step: usize,
        lr: f64,
        loss_main: f64,
        loss_sr: f64,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
