use std::fmt;

use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// The variants map onto the CLI exit-code classes: `Config` is a usage
/// error, `Format`/`Io` are I/O errors, `Check` is a validation failure and
/// everything else is a runtime contract violation.
#[derive(Debug, Error)]
pub enum QnnError {
    #[error("{op}: dimension mismatch {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: index {index} out of range for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("data error at {location}: {message}")]
    Data { location: String, message: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (first utterance {first_id})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        first_id: String,
    },

    #[error("config digest mismatch: checkpoint {checkpoint}, requested {requested}")]
    DigestMismatch { checkpoint: String, requested: String },

    #[error("check failed: {0}")]
    Check(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl QnnError {
    pub fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        QnnError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn config(msg: impl fmt::Display) -> Self {
        QnnError::Config(msg.to_string())
    }

    pub fn format(offset: u64, msg: impl fmt::Display) -> Self {
        QnnError::Format {
            offset,
            message: msg.to_string(),
        }
    }

    pub fn data(location: impl fmt::Display, msg: impl fmt::Display) -> Self {
        QnnError::Data {
            location: location.to_string(),
            message: msg.to_string(),
        }
    }

    /// Short machine-readable class name, used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            QnnError::Dimension { .. } => "dimension",
            QnnError::Index { .. } => "index",
            QnnError::Contract(_) => "contract",
            QnnError::Config(_) => "config",
            QnnError::Format { .. } => "format",
            QnnError::Data { .. } => "data",
            QnnError::NonFiniteLoss { .. } => "non_finite_loss",
            QnnError::DigestMismatch { .. } => "digest_mismatch",
            QnnError::Check(_) => "check",
            QnnError::Io(_) => "io",
        }
    }
}

pub type Result<T, E = QnnError> = std::result::Result<T, E>;
