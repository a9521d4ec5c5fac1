//! Numerical machinery for quantifying spatial aggregation error and choosing
//! a regionalization that minimizes it.
//!
//! The pipeline has three layers:
//!
//! 1. A truncated multiscale basis: compactly supported generating basis
//!    functions (bisquare or Wendland) are reweighted into orthonormal
//!    eigenfunctions via the Gram matrix of the basis over the spatial domain
//!    ([`basis`]).
//! 2. A Bayesian hierarchical model fit by Gibbs sampling, producing posterior
//!    draws of the latent field on a fine areal support ([`inference`]).
//! 3. Aggregation-error criteria (CAGE for point-to-area error, DCAGE for
//!    fine-to-coarse error) evaluated over posterior draws ([`cage`]), and a
//!    two-stage search that clusters posterior draws into candidate supports
//!    and keeps the one with the smallest average criterion ([`regionalize`]).
//!
//! [`geometry`] supplies the areal supports and the Monte Carlo sample clouds
//! that carry every spatial integral; [`synth`] generates the synthetic
//! multiscale data used by the end-to-end experiments; [`io`] holds the CSV
//! and JSON schemas shared with the command-line front end.

pub mod basis;
pub mod cage;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod io;
pub mod regionalize;
pub mod rng;
pub mod synth;

pub use error::{CageError, Result};
