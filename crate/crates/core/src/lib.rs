//! Federated learning on count-sketch-compressed weights.
//!
//! The server holds the full model; clients only ever receive sketched
//! weights (a hash descriptor plus a `c x n` payload with `c < d`), run
//! forward/backward passes directly on the sketched parameterization, and
//! upload gradients of the same compressed shape. The server recovers
//! full-size gradients, applies error feedback with momentum and Top-k
//! sparsification, and steps the global model.
//!
//! Module map:
//! - [`numerics`]: dense row-major `f64` matrices/vectors, spectral norm,
//!   medians, norms. No external linear algebra dependency.
//! - [`sketch`]: count-sketch operators, multi-sketch median recovery,
//!   two-sided sketching, the serialized wire format.
//! - [`nn`]: fully connected and convolutional residual networks, their
//!   sketched forward/backward passes, finite-difference oracles.
//! - [`fed`]: partitioning, broadcast, client updates, aggregation, the
//!   error-feedback Top-k server step, communication accounting.
//! - [`analysis`]: prediction-error bound reports, sketch recovery checks,
//!   convergence trend reports.

pub mod analysis;
pub mod error;
pub mod fed;
pub mod nn;
pub mod numerics;
pub mod seeding;
pub mod sketch;

pub use error::{Error, Result};
