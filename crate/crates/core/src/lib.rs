//! Inception recurrent residual convolutional networks, built from scratch.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`graph`] and [`ops`]: a dense tensor engine with reverse-mode
//!   differentiation.
//! - [`model`]: recurrent convolutional layers, inception-recurrent-residual
//!   units, transition units, and the assembled classifier.
//! - [`data`]: manifests, patient-disjoint splitting, augmentation and patching
//!   for histopathology image sets.
//! - [`train`] and [`checkpoint`]: momentum SGD with a step schedule, and a
//!   bit-exact parameter container.
//! - [`eval`]: image- and patient-level recognition rates, confusion-derived
//!   rates, ROC/AUC and winner-take-all aggregation.
//! - [`gradcheck`]: the finite-difference verification suite.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod model;
pub mod ops;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use graph::{Activation, Graph, Mode, PoolKind, RunningStats, Var};
pub use kernels::Padding;
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Version string echoed into manifests, checkpoints and reports.
pub const TOOL_VERSION: &str = concat!("irrcnn ", env!("CARGO_PKG_VERSION"));
