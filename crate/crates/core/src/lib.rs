//! Spatio-temporal aware non-negative component representations.
//!
//! The crate covers the numeric pipeline from local features to class
//! predictions:
//!
//! - [`featurestore`]: datasets of local features (descriptor + location),
//!   JSON/binary persistence, location normalization and synthetic generation.
//! - [`bovw`]: k-means codebook, localized soft assignment, histogram pooling,
//!   per-word location sets and the space-time pyramid baseline.
//! - [`stdv`]: per-word location GMMs and the weighted Fisher-vector
//!   spatio-temporal distribution vector.
//! - [`stgnmf`]: heat-kernel affinity graphs, graph-regularized NMF with a
//!   blended feature/location graph, out-of-sample encoding and the
//!   pseudoinverse baseline.
//! - [`classify`]: RBF-χ² kernels, one-vs-rest SMO SVM, leave-one-group-out
//!   splits and accuracy metrics.

// Negated float comparisons reject NaN on purpose; index loops mirror the formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bovw;
pub mod classify;
mod error;
pub mod featurestore;
pub mod matfile;
pub mod stdv;
pub mod stgnmf;

pub use error::{Error, Result};
