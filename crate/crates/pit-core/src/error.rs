//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PitError {
    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("channel mismatch: input has {input} channels, layer expects {expected}")]
    ChannelMismatch { input: usize, expected: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("invalid network config at layer {layer}: {msg}")]
    Config { layer: usize, msg: String },
    #[error("vars from different tapes cannot be combined")]
    TapeMismatch,
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("training aborted: non-finite loss at epoch {epoch}")]
    NonFiniteLoss {
        epoch: usize,
        /// Diagnostic checkpoint written on abort, when an output dir was set.
        checkpoint: Option<PathBuf>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PitError>;

impl PitError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PitError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        PitError::Format { path: path.into(), msg: msg.into() }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        PitError::InvalidArg(msg.into())
    }
}
