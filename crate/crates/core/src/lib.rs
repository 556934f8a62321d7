//! Desk-scale scaling-law laboratory for masked-reconstruction transformers
//! on cell-by-gene expression matrices.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode gradient tape.
//! - [`corpus`]: expression matrices, preprocessing, splits, synthetic data and
//!   the XMAT container.
//! - [`model`]: the permutation-invariant encoder and its size presets.
//! - [`trainer`]: masking, masked losses, AdamW, and the training loop.
//! - [`fit`]: the `L = a * P^-alpha + c` power-law fitter.
//! - [`entropy`]: conversions from loss floors to bits per masked position.

pub mod corpus;
pub mod entropy;
pub mod fit;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use corpus::{ExpressionMatrix, SplitAssignment, SplitTag, Stage, SyntheticSpec};
pub use entropy::EntropyEstimate;
pub use fit::{FitResult, ScalingPoint};
pub use model::{ModelConfig, ParameterSet, Preset};
pub use tensor::{Tape, Tensor};
pub use trainer::{RunRecord, TrainConfig};
