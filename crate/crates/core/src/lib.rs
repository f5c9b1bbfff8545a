//! Unsupervised alignment of class prototypes with target features.
//!
//! A zero-shot classifier scores features against per-class prototypes by
//! temperature-scaled cosine similarity. This crate adapts such a classifier
//! to an unlabeled target set by minimizing a bidirectional transport cost
//! between features and prototypes together with a mutual-information
//! objective on the predictions.
//!
//! Modules, bottom up:
//! - [`tensor`], [`graph`]: dense matrices and a reverse-mode gradient engine
//! - [`losses`]: transport costs (conditional, exact, Sinkhorn) and entropy terms
//! - [`prior`]: EMA estimate of target class proportions
//! - [`model`]: encoder/prototype parameters and predictions
//! - [`trainer`]: the adaptation loop plus Tent and UPL baselines
//! - [`data`], [`eval`]: synthetic benchmark, file formats, metrics, exports
//! - [`gradcheck`]: finite-difference verification suite

// `!(x > 0.0)` is how validation rejects NaN alongside non-positive values,
// and the numeric kernels read more plainly with explicit index loops.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod model;
pub mod prior;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
