//! Simulation and analysis of incremental learning in diagonal-weight models.
//!
//! A model `h(x; c)` depends on its trainable weights `θ = (u, v)` only through
//! the products `c = u ⊙ v`. Starting from `θ(0) = α θ₀` with small `α`, the
//! gradient flow learns in stages: each plateau sits near a stationary point
//! whose support grows by at most one coordinate. This crate provides
//!
//! * [`model`]: the linear-diagonal model and the diagonal attention head,
//! * [`objective`]: square loss, student-teacher data and the signal `g(θ)`,
//! * [`gradflow`]: adaptive integration of the flow and an SGD trainer,
//! * [`stagewise`]: the limiting `α → 0` stage schedule,
//! * [`analysis`]: spectra, support, convergence and perturbation checks.

pub mod analysis;
pub mod error;
pub mod gradflow;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod stagewise;

pub use error::{Error, Result};
