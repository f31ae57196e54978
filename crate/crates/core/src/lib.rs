//! Spatio-temporal attention graph neural networks for remaining-useful-life
//! prediction on turbofan degradation data.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`tape`], [`gradcheck`]: dense `f64` tensors with a
//!   reverse-mode autodiff tape and finite-difference checking.
//! - [`dataset`]: C-MAPSS parsing, piecewise-linear RUL labels and sliding
//!   windows.
//! - [`normalization`]: unified and operating-condition clustered min-max
//!   scaling (k-means in [`kmeans`]).
//! - [`graph`]: correlation-thresholded sensor adjacency and its normalized
//!   propagation matrix.
//! - [`model`]: GCN, spatial attention, TCN and temporal attention blocks and
//!   the six ablation variants.
//! - [`training`], [`evaluation`]: Adam training, multi-trial runs, RMSE and
//!   the asymmetric score.
//! - [`surrogate`]: a generator of C-MAPSS-format files for offline testing.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod kmeans;
pub mod model;
pub mod normalization;
pub mod seeding;
pub mod surrogate;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
