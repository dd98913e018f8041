//! Knowledge distillation with label revision and influence-based data selection.
//!
//! The crate is organised bottom-up:
//!
//! - [`numcore`]: softmax family, argmax and the seeded random stream.
//! - [`model`]: a from-scratch MLP with exact reverse-mode gradients, plus
//!   finite-difference Hessian-vector products and dense Hessians.
//! - [`losses`]: cross-entropy, tempered KL, the MSE variants and the two
//!   composite distillation objectives.
//! - [`revision`]: rectifying wrong teacher soft labels with the ground truth.
//! - [`influence`]: influence scores, inverse-HVP solvers and dataset splits.
//! - [`trainer`]: SGD with momentum, step schedules, combined minibatches and
//!   the distillation loop.
//! - [`data`]: datasets, synthetic blobs and the CSV / IDX loaders.
//!
//! All arithmetic is `f64`; every stochastic step is driven by a [`numcore::SeededRng`]
//! so runs are bit-reproducible for a fixed seed.

pub mod data;
pub mod error;
pub mod influence;
pub mod losses;
pub mod model;
pub mod numcore;
pub mod revision;
pub mod trainer;

pub use error::{Error, Result};
