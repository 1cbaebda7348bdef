//! Distribution-level view of language modeling: losses over distribution
//! matrices, minimum-cross-entropy fusion and cross-tokenizer projection.

pub mod align;
mod dist;
pub mod io;
pub mod loss;
mod mince;
mod project;

pub use align::{align_tokens, build_vocab_map, AlignmentMap};
pub use dist::{DistMatrix, GoldLabels};
pub use loss::{combined_loss, cross_entropy, fusion_loss, kl_divergence, DEFAULT_CLAMP};
pub use mince::{fuse_mince, MinceGranularity};
pub use project::project_distribution;

use crate::store::StoreError;

#[derive(Debug, thiserror::Error)]
pub enum FusionError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("row {row} is not a probability distribution: {detail}")]
    NotStochastic { row: usize, detail: String },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    OutOfVocab { id: usize, vocab: usize },
    #[error("lambda must lie in [0, 1], got {0}")]
    InvalidLambda(f64),
    #[error("top_k must be at least 1, got {0}")]
    InvalidTopK(usize),
    #[error("distribution file: {0}")]
    Format(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}
