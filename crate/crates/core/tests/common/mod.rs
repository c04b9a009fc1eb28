#![allow(dead_code)]

use casecross::frames::{build_time_stratified, CalendarMask, ReferenceFrameSet};
use casecross::latent::{ModelSpec, PriorSpec, Rw2EffectSpec, Transform};
use casecross::inference::Problem;
use casecross::likelihood::{DailySeries, Design, DesignOptions, GaussianLikelihood};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};

/// Small count series with one exposure column `x` on [0, 10] and a smooth
/// log-linear effect plus optional daily noise.
pub fn toy_series(n_days: usize, seed: u64, noise_sd: f64) -> DailySeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n_days).map(|_| rng.random_range(0.0..10.0)).collect();
    let noise = Normal::new(0.0, noise_sd.max(1e-300)).unwrap();
    let y: Vec<u64> = x
        .iter()
        .map(|&xi| {
            let z = if noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let mean = (2.5 + 0.3 * (xi / 10.0).sqrt() + z).exp();
            Poisson::new(mean).unwrap().sample(&mut rng) as u64
        })
        .collect();
    DailySeries::new(y).with_covariate("x", x).unwrap()
}

pub fn stratified(n_days: usize) -> ReferenceFrameSet {
    build_time_stratified(n_days, 28, &CalendarMask::new(n_days)).unwrap()
}

pub fn rw2_model(bin_width: f64, overdispersion: bool) -> ModelSpec {
    ModelSpec {
        fixed_effects: Vec::new(),
        spline_effects: Vec::new(),
        rw2_effects: vec![Rw2EffectSpec {
            covariate: "x".into(),
            transform: Transform::None,
            bin_width,
            reference: 5.0,
        }],
        priors: PriorSpec {
            sigma_medians: vec![0.3],
            ..PriorSpec::default()
        },
        overdispersion,
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Response of [`gaussian_problem`].
pub fn gaussian_response(n_days: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    (0..n_days).map(|_| StandardNormal.sample(&mut rng)).collect()
}

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn gaussian_problem(n_days: usize, sd: f64, overdispersion: bool) -> Problem {
    let series = toy_series(n_days, 11, 0.0);
    let y = gaussian_response(n_days);
    let mut model = rw2_model(1.0, overdispersion);
    model.fixed_effects = vec!["x".into()];
    let used = vec![true; n_days];
    let (design, structure) = Design::build(&series, &model, &used, &DesignOptions::default()).unwrap();
    Problem::new(Box::new(GaussianLikelihood { y, sd }), design, structure, model.priors).unwrap()
}

/// Dense prior precision of the full latent field.
pub fn full_precision(problem: &Problem, theta: &[f64]) -> DMatrix<f64> {
    let s = problem.structure();
    let dense = s.dense_precision(theta, problem.priors());
    let d = s.dim();
    let m = s.n_dense();
    let mut q = DMatrix::zeros(d, d);
    q.view_mut((0, 0), (m, m)).copy_from(&dense);
    for i in m..d {
        q[(i, i)] = s.z_precision(theta);
    }
    q
}

pub fn gaussian_logpdf(x: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().unwrap();
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let sol = chol.solve(x);
    -0.5 * (x.len() as f64 * LN_2PI + log_det + x.dot(&sol))
}
