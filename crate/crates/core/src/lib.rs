//! Merging of fine-tuned model checkpoints.
//!
//! The central method interpolates two fine-tuned checkpoints with a
//! coefficient drawn from a symmetric Beta distribution (M³), either
//! directly in parameter space or on top of task arithmetic and TIES.
//! DARE sparsification, a canonical checkpoint container with provenance
//! manifests, and a small training lab for checking interpolation-path
//! behaviour on toy networks are included.

pub mod checkpoint;
pub mod error;
pub mod lab;
pub mod manifest;
pub mod merge;
pub mod rng;
pub mod sampler;
pub mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Digest};
pub use error::{Error, Result};
pub use manifest::{read_manifest, write_manifest, MergeManifest};
pub use merge::{merge, MergeMethod, MergeRecipe, SparsifyConfig};
pub use sampler::{make_sweep, sample_lambda, BetaShape, SamplingRecord, SweepSchedule};
pub use tensor::{apply_deltas, conflict_profile, delta, lerp, DeltaSet, Tensor, TensorMap};
