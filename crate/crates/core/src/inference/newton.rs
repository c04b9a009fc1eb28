//! Inner mode finding `W_hat(theta)` and the Laplace approximation of the
//! hyperparameter marginal.

use serde::{Deserialize, Serialize};

use super::problem::Problem;
use crate::error::{Error, Result};
use crate::latent::hyper_prior_logdensity;
use crate::linalg::ArrowCholesky;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerOptions {
    /// Stop when the gradient max-norm falls below this.
    pub grad_tol: f64,
    /// Relative log-joint change treated as a stall when no step increases it.
    pub rel_tol: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
}

impl Default for InnerOptions {
    fn default() -> Self {
        InnerOptions {
            grad_tol: 1e-8,
            rel_tol: 1e-12,
            max_iterations: 50,
            max_halvings: 30,
        }
    }
}

/// Mode of `W | theta, Y` and the factor of the negative Hessian there.
#[derive(Debug, Clone)]
pub struct InnerModeResult {
    pub theta: Vec<f64>,
    pub w_hat: Vec<f64>,
    pub log_joint: f64,
    pub factor: ArrowCholesky,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Log joint after each accepted step, starting from the initial point.
    pub trace: Vec<f64>,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Newton iterations with step halving on `log pi(W, theta, Y)`.
pub fn inner_optimize(
    problem: &Problem,
    theta: &[f64],
    start: Option<&[f64]>,
    options: &InnerOptions,
) -> Result<InnerModeResult> {
    if theta.len() != problem.n_theta() {
        return Err(Error::invalid(format!(
            "expected {} hyperparameters, got {}",
            problem.n_theta(),
            theta.len()
        )));
    }
    let mut w = match start {
        Some(s) if s.len() == problem.dim() => s.to_vec(),
        Some(_) => return Err(Error::invalid("warm start has the wrong dimension")),
        None => vec![0.0; problem.dim()],
    };
    let mut f = problem.log_joint(&w, theta)?;
    let mut trace = vec![f];
    for iteration in 0..=options.max_iterations {
        let (g, factor) = problem.gradient_and_factor(&w, theta)?;
        let grad_norm = max_abs(&g);
        if grad_norm < options.grad_tol {
            return Ok(InnerModeResult {
                theta: theta.to_vec(),
                w_hat: w,
                log_joint: f,
                factor,
                iterations: iteration,
                grad_norm,
                trace,
            });
        }
        if iteration == options.max_iterations {
            return Err(Error::NonConvergence {
                iterations: iteration,
                grad_norm,
                log_joint: f,
            });
        }
        let (gz, gd) = problem.split(&g);
        let (sz, sd) = factor.solve(gz, gd);
        let step = problem.join(&sz, &sd);
        let mut scale = 1.0;
        let mut accepted = None;
        let mut best_change = f64::INFINITY;
        let round_off = options.rel_tol * f.abs().max(1.0);
        for halving in 0..=options.max_halvings {
            let candidate: Vec<f64> = w.iter().zip(&step).map(|(a, s)| a + scale * s).collect();
            if let Ok(fc) = problem.log_joint(&candidate, theta) {
                if fc >= f {
                    accepted = Some((candidate, fc));
                    break;
                }
                if halving == 0 && f - fc <= round_off {
                    // A full step that loses only round-off: keep it if it lands on the mode.
                    let (gc, factor_c) = problem.gradient_and_factor(&candidate, theta)?;
                    let grad_c = max_abs(&gc);
                    if grad_c < options.grad_tol {
                        return Ok(InnerModeResult {
                            theta: theta.to_vec(),
                            w_hat: candidate,
                            log_joint: fc,
                            factor: factor_c,
                            iterations: iteration + 1,
                            grad_norm: grad_c,
                            trace,
                        });
                    }
                }
                best_change = best_change.min((fc - f).abs());
            }
            scale *= 0.5;
        }
        match accepted {
            Some((candidate, fc)) => {
                w = candidate;
                f = fc;
                trace.push(f);
            }
            None if best_change <= options.rel_tol * f.abs().max(1.0) => {
                // Round-off floor: no representable ascent remains.
                return Ok(InnerModeResult {
                    theta: theta.to_vec(),
                    w_hat: w,
                    log_joint: f,
                    factor,
                    iterations: iteration,
                    grad_norm,
                    trace,
                });
            }
            None => {
                return Err(Error::NonConvergence {
                    iterations: iteration,
                    grad_norm,
                    log_joint: f,
                })
            }
        }
    }
    unreachable!("loop returns on its last iteration")
}

/// `log pi(W_hat, theta, Y) + log pi(theta) + (dim W / 2) log 2 pi - log det(H) / 2`.
pub fn laplace_from_mode(problem: &Problem, mode: &InnerModeResult) -> Result<f64> {
    let prior = hyper_prior_logdensity(&mode.theta, problem.priors(), problem.structure().overdispersion)?;
    Ok(mode.log_joint + prior + 0.5 * problem.dim() as f64 * LN_2PI - 0.5 * mode.factor.log_det())
}

/// Laplace approximation of `log pi(theta, Y)`.
pub fn laplace_log_marginal(
    problem: &Problem,
    theta: &[f64],
    start: Option<&[f64]>,
    options: &InnerOptions,
) -> Result<(f64, InnerModeResult)> {
    let mode = inner_optimize(problem, theta, start, options)?;
    Ok((laplace_from_mode(problem, &mode)?, mode))
}
