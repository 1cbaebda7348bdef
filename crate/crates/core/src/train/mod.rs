//! A desk-scale language model and the pairwise fusion training loop.

pub mod data;
mod fuse;
mod model;
pub mod tokenize;

pub use data::{ingest_dialogues, DialogueSample};
pub use fuse::{
    evaluate, fused_targets, load_teachers, pairwise_fuse, teacher_path, train, EpochLog, FuseOutcome,
    TrainConfig,
};
pub use model::{shifted_labels, Evaluation, ToyLm, EMBED, OUT};
pub use tokenize::{char_tokens, pair_tokens, CharVocab, UNK_ID};

use crate::fusion::FusionError;
use crate::store::StoreError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus line {line}: {message}")]
    Corpus { line: usize, message: String },
    #[error("corpus contains no dialogues")]
    EmptyCorpus,
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no teacher distribution for sample {index} (expected {path})")]
    MissingTeacher { index: usize, path: String },
    #[error("non-finite loss in epoch {epoch} at sample {sample}")]
    NonFiniteLoss { epoch: usize, sample: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Store(#[from] StoreError),
}
