//! Laplace approximation, adaptive Gauss-Hermite quadrature over the
//! hyperparameters, and exact sampling from the resulting mixture.

mod aghq;
mod fit;
mod newton;
mod problem;
mod sampling;

pub use aghq::{aghq_at_mode, aghq_grid, interpolate_log_marginal, fd_hessian, maximize_bfgs, settle_mode, AghqOptions, HyperPosterior, QuadNode};
pub use fit::{
    default_initial_theta, fit, fit_problem, framed_days, CurveSummary, FitDiagnostics, FitOptions, FitResult,
    ParamSummary, ThetaSummary,
};
pub use newton::{inner_optimize, laplace_from_mode, laplace_log_marginal, InnerModeResult, InnerOptions};
pub use problem::Problem;
pub use sampling::{sample_latent, DrawScope, PosteriorDraws};
