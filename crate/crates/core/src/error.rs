//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SlamError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point ({0:.4}, {1:.4}, {2:.4}) outside map bounds")]
    OutOfBounds(f64, f64, f64),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("tracking failed at frame {frame}; falling back to motion-model pose")]
    TrackingFailed {
        frame: usize,
        /// Constant-velocity initial guess as (qw, qx, qy, qz, tx, ty, tz).
        fallback: [f64; 7],
    },

    #[error("mapping failed at frame {frame}, iteration {iteration}: {reason}")]
    MappingFailed {
        frame: usize,
        iteration: usize,
        reason: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SlamError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        SlamError::InvalidArgument(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        SlamError::Format(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, SlamError>;
