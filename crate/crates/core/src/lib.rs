//! Approximate message passing (AMP) for the matrix generalized linear model
//! `Y_i = q(Bᵀ X_i, Ψ_i)` with L signal columns.
//!
//! The crate provides the AMP iteration with its Onsager corrections, the
//! state-evolution recursion that predicts its performance, Bayes-optimal and
//! soft-thresholding denoisers, channel plug-ins for mixed linear regression,
//! max-affine regression and mixture-of-experts, an EM wrapper for estimating
//! max-affine intercepts, and brute-force oracles used to validate all of it.

pub mod amp;
pub mod denoisers;
pub mod em;
pub mod error;
pub mod linalg;
pub mod model;
pub mod oracles;
pub mod se;
pub mod seed;

pub use error::{AmpError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub use linalg::{Mat, Vector};
pub use model::{generate_instance, sample_prior, Channel, Instance, SignalPrior};
