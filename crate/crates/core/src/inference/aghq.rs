//! Adaptive Gauss-Hermite quadrature over the hyperparameters.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::log_sum_exp;
use crate::linalg::gauss_hermite;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AghqOptions {
    /// Nodes per hyperparameter dimension.
    pub order: usize,
    /// Finite-difference step on `theta` for the Hessian at the mode.
    pub hessian_step: f64,
    /// Finite-difference step for the gradients used by the mode search.
    pub gradient_step: f64,
    /// Mode search stops when the gradient max-norm falls below this.
    pub gradient_tol: f64,
    pub max_iterations: usize,
    /// Largest change of any `theta` coordinate in one quasi-Newton step.
    pub max_step: f64,
}

impl Default for AghqOptions {
    fn default() -> Self {
        AghqOptions {
            order: 3,
            hessian_step: 1e-4,
            gradient_step: 1e-4,
            gradient_tol: 1e-4,
            max_iterations: 200,
            max_step: 2.0,
        }
    }
}

/// One adapted node `theta_hat + L z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadNode {
    pub z: Vec<f64>,
    pub theta: Vec<f64>,
    /// `log omega(z)`, including the Gauss-Hermite weight.
    pub log_weight: f64,
    pub log_marginal: f64,
    /// Normalized posterior mass.
    pub mass: f64,
}

/// Quadrature approximation of `pi(theta | Y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperPosterior {
    pub theta_hat: Vec<f64>,
    /// Negative Hessian of the log marginal at the mode.
    pub hessian: Vec<Vec<f64>>,
    /// Lower Cholesky factor of the inverse Hessian.
    pub l_cal: Vec<Vec<f64>>,
    pub nodes: Vec<QuadNode>,
    /// Approximate `log pi(Y)`.
    pub log_normalizer: f64,
    pub mode_iterations: usize,
}

impl HyperPosterior {
    pub fn dim(&self) -> usize {
        self.theta_hat.len()
    }

    pub fn masses(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.mass).collect()
    }

    /// Normalized log density of a one-dimensional posterior at `theta`,
    /// from [`interpolate_log_marginal`] divided by the quadrature estimate of
    /// `pi(Y)`. `None` unless `dim() == 1`.
    pub fn interpolated_log_density(&self, theta: f64) -> Option<f64> {
        if self.dim() != 1 {
            return None;
        }
        let xs: Vec<f64> = self.nodes.iter().map(|n| n.theta[0]).collect();
        let fs: Vec<f64> = self.nodes.iter().map(|n| n.log_marginal).collect();
        let v = interpolate_log_marginal(&xs, &fs, self.theta_hat[0], self.l_cal[0][0], theta);
        Some(v - self.log_normalizer)
    }

    /// Posterior mean of `theta` under the node masses.
    pub fn mean(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| self.nodes.iter().map(|n| n.mass * n.theta[i]).sum())
            .collect()
    }
}

/// Log marginal at `x` from its values `fs` at nodes `xs`: polynomial
/// interpolation inside the node span and, beyond it, the Gaussian curvature
/// of the mode `centre` (standard deviation `scale`) continued from the
/// nearest end. High-order interpolants are not trusted outside the nodes.
pub fn interpolate_log_marginal(xs: &[f64], fs: &[f64], centre: f64, scale: f64, x: f64) -> f64 {
    let n = xs.len();
    if n == 1 {
        return fs[0] - 0.5 * ((x - centre) / scale).powi(2);
    }
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let poly = |x: f64| -> f64 {
        (0..n)
            .map(|i| {
                let li: f64 = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| (x - xs[j]) / (xs[i] - xs[j]))
                    .product();
                fs[i] * li
            })
            .sum()
    };
    let edge = x.clamp(lo, hi);
    if edge == x {
        return poly(x);
    }
    poly(edge) - 0.5 * ((x - centre).powi(2) - (edge - centre).powi(2)) / (scale * scale)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn fd_gradient(f: &dyn Fn(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut g = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        g.push((up - down) / (2.0 * h));
    }
    Ok(g)
}

/// Central-difference Hessian of `f` at `x`, with `f(x) = fx`.
pub fn fd_hessian(f: &dyn Fn(&[f64]) -> Result<f64>, x: &[f64], fx: f64, h: f64) -> Result<DMatrix<f64>> {
    let n = x.len();
    let mut hess = DMatrix::zeros(n, n);
    let mut p = x.to_vec();
    for i in 0..n {
        p[i] = x[i] + h;
        let up = f(&p)?;
        p[i] = x[i] - h;
        let down = f(&p)?;
        p[i] = x[i];
        hess[(i, i)] = (up - 2.0 * fx + down) / (h * h);
        for j in 0..i {
            let mut eval = |si: f64, sj: f64| {
                p[i] = x[i] + si * h;
                p[j] = x[j] + sj * h;
                let v = f(&p);
                p[i] = x[i];
                p[j] = x[j];
                v
            };
            let v = (eval(1.0, 1.0)? - eval(1.0, -1.0)? - eval(-1.0, 1.0)? + eval(-1.0, -1.0)?) / (4.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok(hess)
}

/// Maximizes `f` by BFGS with finite-difference gradients and a
/// backtracking line search. Evaluation failures count as `-inf`.
pub fn maximize_bfgs(
    f: &dyn Fn(&[f64]) -> Result<f64>,
    start: &[f64],
    options: &AghqOptions,
) -> Result<(Vec<f64>, f64, usize)> {
    let n = start.len();
    let mut x = start.to_vec();
    let mut fx = f(&x)?;
    if n == 0 {
        return Ok((x, fx, 0));
    }
    let mut g = fd_gradient(f, &x, options.gradient_step)?;
    // Inverse Hessian approximation of -f.
    let mut b_inv = DMatrix::<f64>::identity(n, n);
    for iteration in 0..options.max_iterations {
        if g.iter().all(|v| v.abs() < options.gradient_tol) {
            return Ok((x, fx, iteration));
        }
        let gv = DVector::from_column_slice(&g);
        let mut dir = &b_inv * &gv;
        if dir.dot(&gv) <= 0.0 {
            b_inv = DMatrix::identity(n, n);
            dir = gv.clone();
        }
        let largest = dir.amax();
        if largest > options.max_step {
            dir *= options.max_step / largest;
        }
        let slope = dir.dot(&gv);
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..40 {
            let cand: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, d)| a + t * d).collect();
            if let Ok(fc) = f(&cand) {
                if fc >= fx + 1e-4 * t * slope {
                    next = Some((cand, fc));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((x_new, f_new)) = next else {
            // No ascent along the direction at finite-difference resolution.
            return Ok((x, fx, iteration));
        };
        let g_new = fd_gradient(f, &x_new, options.gradient_step)?;
        let s = DVector::from_iterator(n, x_new.iter().zip(&x).map(|(a, b)| a - b));
        // y for the minimization of -f
        let y = DVector::from_iterator(n, g.iter().zip(&g_new).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(n, n);
            let left = &eye - rho * &s * y.transpose();
            let right = &eye - rho * &y * s.transpose();
            b_inv = &left * &b_inv * &right + rho * &s * s.transpose();
        }
        let small_step = s.amax() < 1e-10;
        x = x_new;
        fx = f_new;
        g = g_new;
        if small_step {
            return Ok((x, fx, iteration + 1));
        }
    }
    Ok((x, fx, options.max_iterations))
}

/// Checks that `theta` is a strict local maximum of `f` and, when the
/// finite-difference Hessian says otherwise, restarts [`maximize_bfgs`] one
/// `max_step` away along each non-concave direction, keeping the best point.
/// Flat shoulders of the log marginal can stop the search short of the mode.
pub fn settle_mode(
    f: &dyn Fn(&[f64]) -> Result<f64>,
    theta: Vec<f64>,
    f_theta: f64,
    iterations: usize,
    options: &AghqOptions,
) -> Result<(Vec<f64>, f64, usize)> {
    let (mut x, mut fx, mut iters) = (theta, f_theta, iterations);
    if x.is_empty() {
        return Ok((x, fx, iters));
    }
    for _ in 0..3 {
        let neg = |p: &[f64]| f(p).map(|v| -v);
        let hessian = fd_hessian(&neg, &x, -fx, options.hessian_step)?;
        let eig = nalgebra::SymmetricEigen::new(hessian);
        let flat: Vec<usize> = (0..x.len()).filter(|&i| eig.eigenvalues[i] <= 0.0).collect();
        if flat.is_empty() {
            break;
        }
        let mut best: Option<(Vec<f64>, f64, usize)> = None;
        for &i in &flat {
            for sign in [1.0, -1.0] {
                let start: Vec<f64> = x
                    .iter()
                    .zip(eig.eigenvectors.column(i).iter())
                    .map(|(a, v)| a + sign * options.max_step * v)
                    .collect();
                let Ok(found) = maximize_bfgs(f, &start, options) else {
                    continue;
                };
                if best.as_ref().is_none_or(|b| found.1 > b.1) {
                    best = Some(found);
                }
            }
        }
        match best {
            Some((bx, bf, bi)) if bf > fx => {
                log::debug!("mode search restarted from a non-concave point, {fx} -> {bf}");
                x = bx;
                fx = bf;
                iters += bi;
            }
            _ => break,
        }
    }
    Ok((x, fx, iters))
}

/// Builds the adapted product grid around the mode of `log_marginal`.
///
/// `log_marginal` must be safe to call from several threads; node
/// evaluations run in parallel.
pub fn aghq_grid(
    log_marginal: &(dyn Fn(&[f64]) -> Result<f64> + Sync),
    start: &[f64],
    options: &AghqOptions,
) -> Result<HyperPosterior> {
    let k = options.order;
    if k == 0 {
        return Err(Error::invalid("quadrature order must be at least 1"));
    }
    let (theta_hat, f_hat, iterations) = maximize_bfgs(log_marginal, start, options)?;
    let (theta_hat, f_hat, iterations) = settle_mode(log_marginal, theta_hat, f_hat, iterations, options)?;
    aghq_at_mode(log_marginal, theta_hat, f_hat, iterations, options)
}

/// Builds the grid around a mode `theta_hat` already located, with
/// `log_marginal(theta_hat) = f_hat`.
pub fn aghq_at_mode(
    log_marginal: &(dyn Fn(&[f64]) -> Result<f64> + Sync),
    theta_hat: Vec<f64>,
    f_hat: f64,
    iterations: usize,
    options: &AghqOptions,
) -> Result<HyperPosterior> {
    let k = options.order;
    if k == 0 {
        return Err(Error::invalid("quadrature order must be at least 1"));
    }
    let dim = theta_hat.len();
    if dim == 0 {
        return Ok(HyperPosterior {
            theta_hat,
            hessian: Vec::new(),
            l_cal: Vec::new(),
            nodes: vec![QuadNode {
                z: Vec::new(),
                theta: Vec::new(),
                log_weight: 0.0,
                log_marginal: f_hat,
                mass: 1.0,
            }],
            log_normalizer: f_hat,
            mode_iterations: 0,
        });
    }
    let neg = |x: &[f64]| log_marginal(x).map(|v| -v);
    let hessian = fd_hessian(&neg, &theta_hat, -f_hat, options.hessian_step)?;
    let h_chol = nalgebra::Cholesky::new(hessian.clone()).ok_or(Error::HyperHessianNotPd)?;
    let l_cal = nalgebra::Cholesky::new(h_chol.inverse())
        .ok_or(Error::HyperHessianNotPd)?
        .unpack();
    let log_det_l: f64 = l_cal.diagonal().iter().map(|d| d.ln()).sum();

    let (gh_nodes, gh_weights) = gauss_hermite(k);
    let n_nodes = k.pow(dim as u32);
    let mut nodes: Vec<QuadNode> = (0..n_nodes)
        .map(|flat| {
            let mut rem = flat;
            let mut z = vec![0.0; dim];
            let mut log_weight = 0.0;
            for zi in z.iter_mut() {
                let idx = rem % k;
                rem /= k;
                *zi = gh_nodes[idx];
                log_weight += gh_weights[idx].ln() + 0.5 * LN_2PI + 0.5 * gh_nodes[idx] * gh_nodes[idx];
            }
            let shift = &l_cal * DVector::from_column_slice(&z);
            let theta: Vec<f64> = theta_hat.iter().zip(shift.iter()).map(|(a, b)| a + b).collect();
            QuadNode {
                z,
                theta,
                log_weight,
                log_marginal: f64::NAN,
                mass: 0.0,
            }
        })
        .collect();
    let values: Vec<Result<f64>> = {
        use rayon::prelude::*;
        nodes
            .par_iter()
            .map(|node| {
                if node.z.iter().all(|&z| z == 0.0) {
                    Ok(f_hat)
                } else {
                    log_marginal(&node.theta)
                }
            })
            .collect()
    };
    for (node, v) in nodes.iter_mut().zip(values) {
        node.log_marginal = v?;
    }
    let log_terms: Vec<f64> = nodes.iter().map(|n| n.log_marginal + n.log_weight).collect();
    let lse = log_sum_exp(log_terms.iter().copied());
    for (node, lt) in nodes.iter_mut().zip(&log_terms) {
        node.mass = (lt - lse).exp();
    }
    Ok(HyperPosterior {
        theta_hat,
        hessian: rows(&hessian),
        l_cal: rows(&l_cal),
        nodes,
        log_normalizer: log_det_l + lse,
        mode_iterations: iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bfgs_finds_quadratic_maximum() {
        let f = |x: &[f64]| -> Result<f64> { Ok(-(x[0] - 1.0).powi(2) - 3.0 * (x[1] + 2.0).powi(2) - x[0] * x[1]) };
        let (x, _, _) = maximize_bfgs(&f, &[0.0, 0.0], &AghqOptions::default()).unwrap();
        // stationary point of the quadratic
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 6.0]);
        let b = DVector::from_row_slice(&[2.0, -12.0]);
        let exact = a.lu().solve(&b).unwrap();
        assert!((x[0] - exact[0]).abs() < 1e-5 && (x[1] - exact[1]).abs() < 1e-5);
    }

    #[test]
    fn order_one_is_a_single_node() {
        let f = |x: &[f64]| -> Result<f64> { Ok(-0.5 * (x[0] - 0.3).powi(2) / 0.2) };
        let opts = AghqOptions {
            order: 1,
            ..AghqOptions::default()
        };
        let hp = aghq_grid(&f, &[0.0], &opts).unwrap();
        assert_eq!(hp.nodes.len(), 1);
        assert_eq!(hp.nodes[0].mass, 1.0);
        assert!((hp.theta_hat[0] - 0.3).abs() < 1e-5);
    }

    #[test]
    fn gaussian_target_reproduces_gh_weights() {
        let mean = [0.5, -1.0];
        let prec = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]);
        let f = move |x: &[f64]| -> Result<f64> {
            let d = DVector::from_row_slice(&[x[0] - mean[0], x[1] - mean[1]]);
            Ok(7.0 - 0.5 * (d.transpose() * &prec * &d)[0])
        };
        let opts = AghqOptions {
            gradient_tol: 1e-8,
            ..AghqOptions::default()
        };
        let hp = aghq_grid(&f, &[0.0, 0.0], &opts).unwrap();
        let centred = aghq_grid(&f, &mean, &opts).unwrap();
        let (_, w) = gauss_hermite(3);
        for node in &hp.nodes {
            let expected: f64 = node
                .z
                .iter()
                .map(|z| {
                    let idx = gauss_hermite(3).0.iter().position(|n| n == z).unwrap();
                    w[idx]
                })
                .product();
            assert!((node.mass - expected).abs() < 1e-6, "{} vs {expected}", node.mass);
        }
        let m = centred.mean();
        assert!((m[0] - centred.theta_hat[0]).abs() < 1e-10);
        assert!((m[1] - centred.theta_hat[1]).abs() < 1e-10);
        assert!((hp.masses().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // |L| sum pi omega recovers the Gaussian integral exp(7) 2 pi / sqrt(det)
        let exact = 7.0 + LN_2PI - 0.5 * 7f64.ln();
        assert!((hp.log_normalizer - exact).abs() < 1e-5);
    }

    #[test]
    fn masses_are_invariant_to_additive_constants() {
        let f = |x: &[f64]| -> Result<f64> { Ok(-x[0].powi(4) / 4.0 - 0.5 * x[0].powi(2) + 0.3 * x[0]) };
        let g = |x: &[f64]| -> Result<f64> { Ok(f(x)? + 123.0) };
        let a = aghq_grid(&f, &[0.0], &AghqOptions::default()).unwrap();
        let b = aghq_grid(&g, &[0.0], &AghqOptions::default()).unwrap();
        // equal up to finite-difference round-off
        for (x, y) in a.nodes.iter().zip(&b.nodes) {
            assert!((x.mass - y.mass).abs() < 1e-6, "{} vs {}", x.mass, y.mass);
        }
    }

    #[test]
    fn search_leaves_a_shoulder_for_the_mode() {
        // Flat shoulder at 0 where the gradient is below tolerance and the
        // curvature is positive; the mode is at 4.
        let f = |x: &[f64]| -> Result<f64> {
            let t = x[0];
            Ok((-(t - 4.0).powi(2)).exp() + 1e-6 * (-2.0 * t * t).exp())
        };
        let opts = AghqOptions::default();
        let (x, fx, _) = settle_mode(&f, vec![0.0], f(&[0.0]).unwrap(), 0, &opts).unwrap();
        assert!((x[0] - 4.0).abs() < 1e-3, "{x:?}");
        assert!(fx > f(&[0.0]).unwrap());
        assert!(aghq_grid(&f, &[0.0], &opts).is_ok());
    }

    #[test]
    fn non_concave_mode_is_reported() {
        // stationary point that is a minimum
        let f = |x: &[f64]| -> Result<f64> { Ok((x[0] - 1.0).powi(2)) };
        let opts = AghqOptions::default();
        assert!(matches!(aghq_grid(&f, &[1.0], &opts), Err(Error::HyperHessianNotPd)));
    }
}
