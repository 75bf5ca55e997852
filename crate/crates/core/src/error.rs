//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Malformed input data: lexicon/corpus/ARPA/dataset/checkpoint files,
    /// out-of-vocabulary symbols, shape mismatches.
    #[error("{0}")]
    Data(String),

    /// A numerical invariant was violated (broken log-domain identity,
    /// non-finite gradient, failed gradient check).
    #[error("{0}")]
    Numeric(String),

    /// Target token string is longer than the utterance; no alignment exists.
    #[error("target has {target_len} tokens but only {frames} frames; no alignment exists")]
    Unalignable { target_len: usize, frames: usize },

    /// The beam lost every live (or word-boundary) hypothesis; the beam is
    /// too small for the utterance.
    #[error("no complete hypothesis at frame {frame}; beam too small")]
    BeamExhausted { frame: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn data(msg: impl Into<String>) -> Self {
        CoreError::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        CoreError::Numeric(msg.into())
    }
}
