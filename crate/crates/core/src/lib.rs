//! Pairwise distribution-level knowledge fusion and variation-ratio merging of
//! language-model checkpoints.
//!
//! The crate has four layers:
//!
//! * [`store`], [`compat`], [`partition`]: the checkpoint container, compatibility
//!   checks and the assignment of scalars to merge units.
//! * [`merge`]: variation-ratio merging plus linear, SLERP, task-arithmetic,
//!   TIES and DARE baselines.
//! * [`fusion`]: distribution matrices, CLM/KL losses, minimum-cross-entropy
//!   fusion and cross-tokenizer projection.
//! * [`train`]: a desk-scale language model and trainer that produces real
//!   fine-tuned targets for the merge engine.
//!
//! Numeric code is generic over [`Element`] (`f32` or `f64`); the aliases below
//! name the common instantiations.

pub mod compat;
pub mod fusion;
pub mod merge;
pub mod partition;
pub mod scalar;
pub mod store;
pub mod tensor;
pub mod train;

pub use compat::{validate_compatible, CompatibilityReport, Mismatch, MismatchKind};
pub use fusion::{DistMatrix, GoldLabels};
pub use partition::{partition_units, Granularity, LayerPattern, UnitPartition};
pub use scalar::{DType, Element};
pub use store::{load_checkpoint, save_checkpoint, StoreError};
pub use tensor::{Checkpoint, Tensor, TensorData};
pub use train::ToyLm;

/// Double-precision distribution matrix, the default for fusion and training.
pub type DistMatrix64 = DistMatrix<f64>;
pub type DistMatrix32 = DistMatrix<f32>;
/// Double-precision toy model; gradient checks run at this precision.
pub type ToyLm64 = ToyLm<f64>;
pub type ToyLm32 = ToyLm<f32>;
