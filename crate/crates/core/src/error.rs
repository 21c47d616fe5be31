use alloc::string::String;

use thiserror::Error;

use crate::tensor::TensorError;

/// Errors raised by the model, data and training code.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("token id {id} is outside the vocabulary of {vocab}")]
    OutOfVocabulary { id: u32, vocab: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{frames} frames cannot align a target needing {required}")]
    Infeasible { frames: usize, required: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("schedule never reaches the full source length")]
    IncompleteTrace,
    #[error("no alignment links")]
    NoLinks,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("line {line}: {msg}")]
    Corpus { line: usize, msg: String },
    #[error("unknown ablation variant `{0}`")]
    UnknownAblation(String),
    #[error("model has no sorting network parameters")]
    MissingSortingNetwork,
    #[error("no trainable sentence pairs")]
    NoTrainablePairs,
    #[error("parameter mismatch on init: {0}")]
    InitMismatch(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }
}
