use thiserror::Error;

use crate::dataset::DatasetError;
use crate::embeddings::EmbeddingError;
use crate::encoders::EncoderError;
use crate::kb::KbError;
use crate::numerics::NumericsError;
use crate::pipeline::checkpoint::CheckpointError;

/// Top-level error of training, evaluation and the command layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("knowledge base: {0}")]
    Kb(#[from] KbError),
    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),
    #[error("embeddings: {0}")]
    Embedding(#[from] EmbeddingError),
    #[error("encoder: {0}")]
    Encoder(#[from] EncoderError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("numerics: {0}")]
    Numerics(#[from] NumericsError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Validation(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite {what} at epoch {epoch}")]
    NonFinite { what: &'static str, epoch: usize },
    #[error("gradient check failed: max relative error {max_rel_error:.3e} >= {threshold:.1e}")]
    GradCheck { max_rel_error: f64, threshold: f64 },
}

impl Error {
    /// Process exit status: 1 for bad input, 2 for numeric failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::NonFinite { .. } | Error::GradCheck { .. } | Error::Numerics(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
