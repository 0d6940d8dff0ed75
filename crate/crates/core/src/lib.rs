//! Gradient-free analytic training of layered networks, centrally and
//! across federated clients.
//!
//! Each trainable layer is fit once, by a ridge-regularized least-squares
//! solve against label-derived targets, in input-to-output order. Because
//! the solve only needs the summed moments `XᵀX` and `XᵀZ`, clients can
//! upload those moments and the server reproduces the centralized weights
//! regardless of how data is partitioned or batched.

pub mod acnnl;
pub mod data;
pub mod encoding;
pub mod error;
pub mod fed;
pub mod io;
pub mod model;
pub mod numerics;
pub mod pfed;

pub use error::{Error, Result};
pub use numerics::{LayerStats, Matrix};
