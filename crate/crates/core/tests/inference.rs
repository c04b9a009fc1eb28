mod common;

use casecross::inference::{
    fit, fit_problem, inner_optimize, laplace_log_marginal, sample_latent, DrawScope, FitOptions, HyperPosterior,
    InnerModeResult, InnerOptions, Problem, QuadNode,
};
use casecross::latent::hyper_prior_logdensity;
use casecross::likelihood::{CondPoisson, Design, DesignOptions};
use casecross::linalg::{ArrowCholesky, SymBand};
use common::*;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn poisson_problem(n_days: usize, bin_width: f64, overdispersion: bool, seed: u64) -> Problem {
    let series = toy_series(n_days, seed, 0.1);
    let frames = stratified(n_days);
    let model = rw2_model(bin_width, overdispersion);
    let used = vec![true; n_days];
    let (design, structure) = Design::build(&series, &model, &used, &DesignOptions::default()).unwrap();
    let lik = CondPoisson::new(series.y(), &frames).unwrap();
    Problem::new(Box::new(lik), design, structure, model.priors).unwrap()
}

#[test]
fn latent_prior_is_a_normalized_gaussian() {
    let problem = gaussian_problem(30, 0.7, true);
    let theta = [0.4, 1.3];
    let q = full_precision(&problem, &theta);
    let cov = q.clone().try_inverse().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = DVector::from_fn(problem.dim(), |_, _| StandardNormal.sample(&mut rng));
    let ours = problem.structure().log_density(w.as_slice(), &theta, problem.priors()).unwrap();
    assert!((ours - gaussian_logpdf(&w, &cov)).abs() < 1e-8);
}

#[test]
fn laplace_is_exact_for_gaussian_models() {
    for overdispersion in [false, true] {
        let problem = gaussian_problem(40, 0.8, overdispersion);
        let theta: Vec<f64> = if overdispersion { vec![0.5, 1.5] } else { vec![1.5] };
        let (lap, mode) = laplace_log_marginal(&problem, &theta, None, &InnerOptions::default()).unwrap();
        assert!(mode.iterations <= 2, "Newton is exact on quadratics: {} iterations", mode.iterations);
        let j = problem.design().incidence_dense();
        let cov_w = full_precision(&problem, &theta).try_inverse().unwrap();
        let y = DVector::from_vec(gaussian_response(40));
        let cov_y = &j * cov_w * j.transpose() + DMatrix::identity(40, 40) * 0.64;
        let exact = gaussian_logpdf(&y, &cov_y)
            + hyper_prior_logdensity(&theta, problem.priors(), overdispersion).unwrap();
        assert!((lap - exact).abs() < 1e-8, "{lap} vs {exact}");
    }
}

#[test]
fn gaussian_mode_is_reached_in_one_step() {
    let problem = gaussian_problem(40, 0.8, true);
    let mode = inner_optimize(&problem, &[0.5, 1.5], None, &InnerOptions::default()).unwrap();
    assert_eq!(mode.trace.len(), 2);
    assert!(mode.grad_norm < 1e-8);
}

#[test]
fn newton_steps_never_decrease_the_log_joint() {
    for seed in 1..4 {
        let problem = poisson_problem(100, 1.0, true, seed);
        let mode = inner_optimize(&problem, &[4.0, 2.0], None, &InnerOptions::default()).unwrap();
        assert!(mode.trace.windows(2).all(|w| w[1] >= w[0]));
        assert!(mode.grad_norm < 1e-8);
    }
}

/// Maximizes `phi` on a line by bracketing and golden-section search.
fn line_max(phi: &dyn Fn(f64) -> f64) -> f64 {
    let gr = (5f64.sqrt() - 1.0) / 2.0;
    let mut step = 1e-2;
    let f0 = phi(0.0);
    let (mut a, mut b);
    if phi(step) >= f0 {
        a = 0.0;
        b = step;
        while phi(b + step) >= phi(b) {
            a = b;
            step *= 2.0;
            b += step;
        }
        b += step;
    } else {
        a = -step;
        b = step;
        while phi(a - step) >= phi(a) {
            b = a;
            step *= 2.0;
            a -= step;
        }
        a -= step;
    }
    let mut c = b - gr * (b - a);
    let mut d = a + gr * (b - a);
    let (mut fc, mut fd) = (phi(c), phi(d));
    while (b - a).abs() > 1e-12 * (1.0 + a.abs()) {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - gr * (b - a);
            fc = phi(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + gr * (b - a);
            fd = phi(d);
        }
    }
    0.5 * (a + b)
}

/// Powell's conjugate-direction method (maximization).
fn powell(f: &dyn Fn(&[f64]) -> f64, start: &[f64], iterations: usize) -> Vec<f64> {
    let n = start.len();
    let mut dirs: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut x = start.to_vec();
    let along = |x: &[f64], d: &[f64], t: f64| -> Vec<f64> { x.iter().zip(d).map(|(a, b)| a + t * b).collect() };
    for _ in 0..iterations {
        let x0 = x.clone();
        let f_start = f(&x);
        let (mut biggest, mut biggest_gain) = (0, 0.0);
        for (i, d) in dirs.iter().enumerate() {
            let before = f(&x);
            let t = line_max(&|t| f(&along(&x, d, t)));
            x = along(&x, d, t);
            let gain = f(&x) - before;
            if gain > biggest_gain {
                biggest = i;
                biggest_gain = gain;
            }
        }
        let new_dir: Vec<f64> = x.iter().zip(&x0).map(|(a, b)| a - b).collect();
        if new_dir.iter().all(|v| v.abs() < 1e-14) || f(&x) - f_start < 1e-15 {
            break;
        }
        let t = line_max(&|t| f(&along(&x, &new_dir, t)));
        x = along(&x, &new_dir, t);
        dirs.remove(biggest);
        dirs.push(new_dir);
    }
    x
}

#[test]
fn inner_mode_matches_derivative_free_optimizer() {
    // a fixed effect plus 14 random-walk values (bins of width 0.75 over [0, 10])
    let n_days = 120;
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let v: Vec<f64> = (0..n_days).map(|_| StandardNormal.sample(&mut rng)).collect();
    let series = toy_series(n_days, 8, 0.1).with_covariate("v", v).unwrap();
    let frames = stratified(n_days);
    let mut model = rw2_model(0.75, false);
    model.fixed_effects = vec!["v".into()];
    let (design, structure) = Design::build(&series, &model, &vec![true; n_days], &DesignOptions::default()).unwrap();
    let lik = CondPoisson::new(series.y(), &frames).unwrap();
    let problem = Problem::new(Box::new(lik), design, structure, model.priors).unwrap();
    assert_eq!(problem.dim(), 15);
    let theta = [3.0];
    let mode = inner_optimize(&problem, &theta, None, &InnerOptions::default()).unwrap();
    let f = |w: &[f64]| problem.log_joint(w, &theta).unwrap();
    let oracle = powell(&f, &vec![0.0; 15], 200);
    let diff = max_abs_diff(&mode.w_hat, &oracle);
    assert!(diff < 1e-5, "max coordinate difference {diff}");
}

fn unit_mode(mean: f64, theta: f64) -> InnerModeResult {
    let factor = ArrowCholesky::new(Vec::new(), &SymBand::zeros(0, 0), &DMatrix::zeros(0, 1), &DMatrix::identity(1, 1))
        .unwrap();
    InnerModeResult {
        theta: vec![theta],
        w_hat: vec![mean],
        log_joint: 0.0,
        factor,
        iterations: 0,
        grad_norm: 0.0,
        trace: vec![0.0],
    }
}

fn two_node_posterior(masses: [f64; 2]) -> HyperPosterior {
    HyperPosterior {
        theta_hat: vec![0.0],
        hessian: vec![vec![1.0]],
        l_cal: vec![vec![1.0]],
        nodes: (0..2)
            .map(|k| QuadNode {
                z: vec![k as f64],
                theta: vec![k as f64],
                log_weight: 0.0,
                log_marginal: masses[k].ln(),
                mass: masses[k],
            })
            .collect(),
        log_normalizer: 0.0,
        mode_iterations: 0,
    }
}

#[test]
fn mixture_draws_have_the_mixture_mean() {
    let hp = two_node_posterior([0.3, 0.7]);
    let modes = [unit_mode(0.0, 0.0), unit_mode(1.0, 1.0)];
    let s = 200_000;
    let d = sample_latent(&hp, &modes, s, 42, DrawScope::Full).unwrap();
    let mean = d.values.column(0).mean();
    // variance of the mixture: 1 + 0.3 * 0.7
    let se = (1.21f64 / s as f64).sqrt();
    assert!((mean - 0.7).abs() < 3.0 * se, "{mean}");
}

#[test]
fn node_frequencies_match_masses() {
    let hp = two_node_posterior([0.3, 0.7]);
    let modes = [unit_mode(0.0, 0.0), unit_mode(1.0, 1.0)];
    let s = 100_000;
    let d = sample_latent(&hp, &modes, s, 7, DrawScope::Dense).unwrap();
    let n1 = d.node.iter().filter(|&&k| k == 1).count() as f64;
    let expected = [0.3 * s as f64, 0.7 * s as f64];
    let observed = [s as f64 - n1, n1];
    let chi2: f64 = observed.iter().zip(&expected).map(|(o, e)| (o - e).powi(2) / e).sum();
    // 0.999 quantile of chi-square with one degree of freedom
    assert!(chi2 < 10.83, "{chi2}");
}

#[test]
fn identical_seeds_give_identical_draws() {
    let hp = two_node_posterior([0.5, 0.5]);
    let modes = [unit_mode(0.0, 0.0), unit_mode(1.0, 1.0)];
    let a = sample_latent(&hp, &modes, 500, 9, DrawScope::Full).unwrap();
    let b = sample_latent(&hp, &modes, 500, 9, DrawScope::Full).unwrap();
    assert_eq!(a, b);
    let c = sample_latent(&hp, &modes, 500, 10, DrawScope::Full).unwrap();
    assert_ne!(a, c);
}

#[test]
fn single_node_draws_centre_on_the_mode() {
    let problem = gaussian_problem(40, 0.8, true);
    let mut options = FitOptions::default();
    options.aghq.order = 1;
    options.n_draws = 4000;
    options.draw_z = true;
    let res = fit_problem(&problem, &[0.5, 1.5], &options).unwrap();
    assert_eq!(res.hyper.nodes.len(), 1);
    let mode = &res.node_modes[0];
    let dense = problem.neg_hessian_dense(&mode.w_hat, &mode.theta).unwrap();
    let cov = dense.try_inverse().unwrap();
    for j in 0..problem.dim() {
        let mean = res.draws.values.column(j).mean();
        let sd = cov[(j, j)].sqrt();
        assert!((mean - mode.w_hat[j]).abs() < 4.0 * sd / (4000f64).sqrt());
    }
}

#[test]
fn order_one_fit_is_the_laplace_fit() {
    let problem = poisson_problem(150, 1.0, false, 3);
    let mut options = FitOptions::default();
    options.aghq.order = 1;
    options.n_draws = 200;
    let res = fit_problem(&problem, &[2.0], &options).unwrap();
    let (lap, mode) =
        laplace_log_marginal(&problem, &res.hyper.theta_hat, None, &InnerOptions::default()).unwrap();
    assert!((res.hyper.nodes[0].log_marginal - lap).abs() < 1e-9);
    assert!(max_abs_diff(&res.node_modes[0].w_hat, &mode.w_hat) < 1e-7);
    assert_eq!(res.hyper.nodes[0].mass, 1.0);
}

#[test]
fn fit_reports_overdispersion_only_when_modelled() {
    let series = toy_series(300, 21, 0.0);
    let frames = stratified(300);
    let mut options = FitOptions::default();
    options.n_draws = 200;
    for overdispersion in [false, true] {
        let model = rw2_model(1.0, overdispersion);
        let res = fit(&series, &frames, &model, &options).unwrap();
        let has = res.theta.iter().any(|t| t.name == "overdispersion");
        assert_eq!(has, overdispersion);
        assert_eq!(res.hyper.nodes.len(), 3usize.pow(model.n_theta() as u32));
        let total: f64 = res.hyper.masses().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(res.theta.iter().all(|t| t.sigma_median.is_finite()));
        let curve = res.curve("x").unwrap();
        assert!(curve.lower.iter().zip(&curve.upper).all(|(l, u)| l <= u));
        assert!(res.diagnostics.node_grad_norms.iter().all(|g| *g < 1e-8));
    }
}

#[test]
fn fit_is_reproducible() {
    let series = toy_series(200, 4, 0.05);
    let frames = stratified(200);
    let model = rw2_model(1.0, true);
    let mut options = FitOptions::default();
    options.n_draws = 300;
    let a = fit(&series, &frames, &model, &options).unwrap();
    let b = fit(&series, &frames, &model, &options).unwrap();
    assert_eq!(a.draws, b.draws);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}
