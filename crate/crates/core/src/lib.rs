//! Bayesian inference for overdispersed case-crossover models.
//!
//! Daily event counts are analysed through the conditional Poisson partial
//! likelihood induced by a reference-frame design, with a latent Gaussian
//! field made of fixed effects, binned second-order random-walk
//! exposure-response curves and daily overdispersion effects. Posteriors are
//! approximated with a Laplace approximation nested inside adaptive
//! Gauss-Hermite quadrature over the log-precision hyperparameters.
//!
//! The crate also ships the simulation tooling used to study coverage of the
//! resulting credible intervals and global envelopes.

pub mod error;
pub mod eval;
pub mod experiment;
pub mod frames;
pub mod inference;
pub mod latent;
pub mod likelihood;
pub mod linalg;
pub mod simgen;

#[doc(hidden)]
pub mod cli;

pub use error::{Error, Result};
