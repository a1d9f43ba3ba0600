use thiserror::Error;

/// Errors raised anywhere in the capture pipeline.
#[derive(Debug, Error)]
pub enum WipError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate geometry (rank {rank}): {message}")]
    DegenerateGeometry { rank: usize, message: String },

    #[error("parse error at line {line}, field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("generator underflow: need {needed} frames, got {got}")]
    Underflow { needed: usize, got: usize },

    #[error("freeze audit failed: {0}")]
    FreezeAudit(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl WipError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        WipError::InvalidInput(msg.into())
    }

    pub(crate) fn parse(line: usize, field: impl Into<String>, msg: impl Into<String>) -> Self {
        WipError::Parse {
            line,
            field: field.into(),
            message: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, WipError>;
