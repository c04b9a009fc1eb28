//! End-to-end fit: design, Laplace marginal, quadrature grid, sampling and
//! summaries.

use std::sync::Mutex;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::aghq::{aghq_at_mode, interpolate_log_marginal, maximize_bfgs, settle_mode, AghqOptions, HyperPosterior};
use super::newton::{inner_optimize, laplace_from_mode, InnerModeResult, InnerOptions};
use super::problem::Problem;
use super::sampling::{sample_latent, DrawScope, PosteriorDraws};
use crate::error::{Error, Result};
use crate::eval::{erl_envelope, quantile_sorted, sorted_column};
use crate::frames::ReferenceFrameSet;
use crate::latent::{sigma_from_theta, theta_from_sigma, ModelSpec};
use crate::likelihood::{CondPoisson, CurveKind, DailySeries, Design, DesignOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub aghq: AghqOptions,
    pub inner: InnerOptions,
    pub n_draws: usize,
    pub seed: u64,
    /// Credible level of the reported intervals.
    pub level: f64,
    /// Also draw and summarize the daily effects `Z`.
    pub draw_z: bool,
    pub design: DesignOptions,
    /// Starting point of the hyperparameter mode search.
    pub initial_theta: Option<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            aghq: AghqOptions::default(),
            inner: InnerOptions::default(),
            n_draws: 1000,
            seed: 1,
            level: 0.8,
            draw_z: false,
            design: DesignOptions::default(),
            initial_theta: None,
        }
    }
}

/// Marginal summary of one hyperparameter, on the log-precision scale and
/// on the standard-deviation scale `sigma = exp(-theta/2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaSummary {
    pub name: String,
    pub mode: f64,
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub sigma_mode: f64,
    pub sigma_median: f64,
    pub sigma_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Posterior of an exposure-response curve on its grid.
#[derive(Debug, Clone, Serialize)]
pub struct CurveSummary {
    pub covariate: String,
    pub kind: CurveKind,
    pub grid: Vec<f64>,
    pub exposure: Vec<f64>,
    pub n_obs: Vec<usize>,
    pub reference: f64,
    pub mean: Vec<f64>,
    pub median: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// `S x G` curve draws.
    #[serde(skip)]
    pub draws: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub n_days: usize,
    pub retained_days: usize,
    pub dropped_cases: u64,
    pub dim_w: usize,
    pub n_dense: usize,
    pub z_bandwidth: usize,
    pub mode_iterations: usize,
    pub node_inner_iterations: Vec<usize>,
    pub node_grad_norms: Vec<f64>,
    pub log_normalizer: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub level: f64,
    pub hyper: HyperPosterior,
    pub theta: Vec<ThetaSummary>,
    pub fixed: Vec<ParamSummary>,
    pub curves: Vec<CurveSummary>,
    pub z: Option<Vec<ParamSummary>>,
    pub diagnostics: FitDiagnostics,
    /// Names of the draw columns.
    pub column_names: Vec<String>,
    #[serde(skip)]
    pub draws: PosteriorDraws,
    #[serde(skip)]
    pub node_modes: Vec<InnerModeResult>,
}

impl FitResult {
    pub fn curve(&self, covariate: &str) -> Option<&CurveSummary> {
        self.curves.iter().find(|c| c.covariate == covariate)
    }

    /// Writes the draws as CSV with a `draw,node` prefix.
    pub fn write_draws_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["draw".to_string(), "node".to_string()];
        header.extend(self.column_names.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.draws.n_draws() {
            let mut rec = vec![(i + 1).to_string(), self.draws.node[i].to_string()];
            rec.extend(self.draws.values.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes one row per curve grid point, with the ERL envelope at the
    /// fit's credible level.
    pub fn write_curves_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "covariate",
            "kind",
            "grid",
            "exposure",
            "n_obs",
            "mean",
            "median",
            "lower",
            "upper",
            "envelope_lower",
            "envelope_upper",
        ])?;
        for c in &self.curves {
            let envelope = erl_envelope(&c.draws, self.level).ok();
            let kind = match c.kind {
                CurveKind::Rw2 => "rw2",
                CurveKind::Spline => "spline",
            };
            for g in 0..c.grid.len() {
                w.write_record([
                    c.covariate.clone(),
                    kind.to_string(),
                    c.grid[g].to_string(),
                    c.exposure[g].to_string(),
                    c.n_obs[g].to_string(),
                    c.mean[g].to_string(),
                    c.median[g].to_string(),
                    c.lower[g].to_string(),
                    c.upper[g].to_string(),
                    envelope.as_ref().map_or(String::new(), |e| e.lower[g].to_string()),
                    envelope.as_ref().map_or(String::new(), |e| e.upper[g].to_string()),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Default start of the mode search: `sigma_0 = 0.1` and each random-walk
/// `sigma` at its prior median.
pub fn default_initial_theta(model: &ModelSpec) -> Vec<f64> {
    let mut theta = Vec::with_capacity(model.n_theta());
    if model.overdispersion {
        theta.push(theta_from_sigma(0.1));
    }
    theta.extend(model.priors.sigma_medians.iter().map(|&m| theta_from_sigma(m)));
    theta
}

/// Days that belong to at least one reference frame.
pub fn framed_days(frames: &ReferenceFrameSet) -> Vec<bool> {
    (1..=frames.n_days()).map(|d| frames.frame_of(d).is_some()).collect()
}

/// Fits `model` to `data` with the conditional Poisson likelihood over
/// `frames`.
pub fn fit(data: &DailySeries, frames: &ReferenceFrameSet, model: &ModelSpec, options: &FitOptions) -> Result<FitResult> {
    model.validate().map_err(|e| e.at_stage("model"))?;
    if frames.n_days() != data.n_days() {
        return Err(Error::invalid(format!(
            "frames cover {} days but the series has {}",
            frames.n_days(),
            data.n_days()
        ))
        .at_stage("frames"));
    }
    let clock = Instant::now();
    let used = framed_days(frames);
    let (design, structure) =
        Design::build(data, model, &used, &options.design).map_err(|e| e.at_stage("design"))?;
    let likelihood = CondPoisson::new(data.y(), frames).map_err(|e| e.at_stage("likelihood"))?;
    let dropped = likelihood.dropped_cases();
    let problem = Problem::new(Box::new(likelihood), design, structure, model.priors.clone())
        .map_err(|e| e.at_stage("likelihood"))?;
    log::info!("design built in {:.3}s", clock.elapsed().as_secs_f64());
    let start = options
        .initial_theta
        .clone()
        .unwrap_or_else(|| default_initial_theta(model));
    let mut result = fit_problem(&problem, &start, options)?;
    result.diagnostics.dropped_cases = dropped;
    result.diagnostics.retained_days = used.iter().filter(|&&u| u).count();
    Ok(result)
}

fn theta_names(problem: &Problem) -> Vec<String> {
    let mut names = Vec::new();
    if problem.structure().overdispersion {
        names.push("overdispersion".to_string());
    }
    for c in problem.design().curves() {
        if c.kind == CurveKind::Rw2 {
            names.push(format!("rw2:{}", c.covariate));
        }
    }
    names
}

/// Runs the inference pipeline on an assembled problem.
pub fn fit_problem(problem: &Problem, start: &[f64], options: &FitOptions) -> Result<FitResult> {
    if start.len() != problem.n_theta() {
        return Err(Error::invalid(format!(
            "initial theta has {} entries, expected {}",
            start.len(),
            problem.n_theta()
        ))
        .at_stage("hyperparameter mode"));
    }
    if !(options.level > 0.0 && options.level < 1.0) {
        return Err(Error::invalid("level must lie strictly between 0 and 1"));
    }
    let inner = options.inner;

    // Mode search: sequential, each inner fit warm-started from the last.
    let clock = Instant::now();
    let warm: Mutex<Option<Vec<f64>>> = Mutex::new(None);
    let searching = |theta: &[f64]| -> Result<f64> {
        let prev = warm.lock().expect("warm start lock").clone();
        let mode = match inner_optimize(problem, theta, prev.as_deref(), &inner) {
            Ok(m) => m,
            Err(_) if prev.is_some() => inner_optimize(problem, theta, None, &inner)?,
            Err(e) => return Err(e),
        };
        let v = laplace_from_mode(problem, &mode)?;
        *warm.lock().expect("warm start lock") = Some(mode.w_hat);
        Ok(v)
    };
    let (theta_hat, f_search, mode_iterations) =
        maximize_bfgs(&searching, start, &options.aghq).map_err(|e| e.at_stage("hyperparameter mode"))?;
    let (theta_hat, _, mode_iterations) = settle_mode(&searching, theta_hat, f_search, mode_iterations, &options.aghq)
        .map_err(|e| e.at_stage("hyperparameter mode"))?;
    let centre = inner_optimize(problem, &theta_hat, warm.lock().expect("warm start lock").as_deref(), &inner)
        .map_err(|e| e.at_stage("hyperparameter mode"))?;
    let f_hat = laplace_from_mode(problem, &centre).map_err(|e| e.at_stage("hyperparameter mode"))?;
    log::info!(
        "hyperparameter mode after {mode_iterations} iterations in {:.3}s",
        clock.elapsed().as_secs_f64()
    );

    // Grid: every evaluation starts from the central mode, so results do not
    // depend on evaluation order.
    let clock = Instant::now();
    let stored: Mutex<Vec<InnerModeResult>> = Mutex::new(Vec::new());
    let at_node = |theta: &[f64]| -> Result<f64> {
        let mode = inner_optimize(problem, theta, Some(&centre.w_hat), &inner)?;
        let v = laplace_from_mode(problem, &mode)?;
        stored.lock().expect("mode store lock").push(mode);
        Ok(v)
    };
    let hyper = aghq_at_mode(&at_node, theta_hat.clone(), f_hat, mode_iterations, &options.aghq)
        .map_err(|e| e.at_stage("quadrature"))?;
    let stored = stored.into_inner().expect("mode store lock");
    let modes: Vec<InnerModeResult> = hyper
        .nodes
        .iter()
        .map(|node| {
            if node.theta == centre.theta {
                return Ok(centre.clone());
            }
            stored
                .iter()
                .find(|m| m.theta == node.theta)
                .cloned()
                .ok_or_else(|| Error::invalid("missing inner mode for a quadrature node"))
        })
        .collect::<Result<_>>()
        .map_err(|e| e.at_stage("quadrature"))?;
    log::info!("{} quadrature nodes in {:.3}s", hyper.nodes.len(), clock.elapsed().as_secs_f64());

    let clock = Instant::now();
    let scope = if options.draw_z { DrawScope::Full } else { DrawScope::Dense };
    let draws =
        sample_latent(&hyper, &modes, options.n_draws, options.seed, scope).map_err(|e| e.at_stage("sampling"))?;
    log::info!("{} draws in {:.3}s", options.n_draws, clock.elapsed().as_secs_f64());

    let design = problem.design();
    let structure = problem.structure();
    let n_dense = design.n_dense();
    let mut column_names = design.column_names().to_vec();
    if scope == DrawScope::Full {
        column_names.extend((1..=structure.n_z()).map(|t| format!("z{t}")));
    }
    let level = options.level;
    let dense = draws.leading_columns(n_dense);
    let curves = design
        .curves()
        .par_iter()
        .map(|c| {
            let cd = &dense * c.weights.transpose();
            let (mean, median, lower, upper) = column_summaries(&cd, level);
            CurveSummary {
                covariate: c.covariate.clone(),
                kind: c.kind,
                grid: c.grid.clone(),
                exposure: c.exposure.clone(),
                n_obs: c.n_obs.clone(),
                reference: c.reference,
                mean,
                median,
                lower,
                upper,
                draws: cd,
            }
        })
        .collect();
    let fixed = structure
        .beta_range()
        .map(|j| param_summary(&column_names[j], &draws.values, j, level))
        .collect();
    let z = (scope == DrawScope::Full).then(|| {
        structure
            .z_range()
            .into_par_iter()
            .map(|j| param_summary(&column_names[j], &draws.values, j, level))
            .collect()
    });
    let theta = theta_summaries(&hyper, &theta_names(problem));
    let diagnostics = FitDiagnostics {
        n_days: design.n_days(),
        retained_days: design.n_days(),
        dropped_cases: 0,
        dim_w: problem.dim(),
        n_dense,
        z_bandwidth: problem.z_bandwidth(),
        mode_iterations,
        node_inner_iterations: modes.iter().map(|m| m.iterations).collect(),
        node_grad_norms: modes.iter().map(|m| m.grad_norm).collect(),
        log_normalizer: hyper.log_normalizer,
    };
    Ok(FitResult {
        level,
        hyper,
        theta,
        fixed,
        curves,
        z,
        diagnostics,
        column_names,
        draws,
        node_modes: modes,
    })
}

fn column_summaries(m: &DMatrix<f64>, level: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let (lo_p, hi_p) = ((1.0 - level) / 2.0, (1.0 + level) / 2.0);
    let g = m.ncols();
    let (mut mean, mut median, mut lower, mut upper) =
        (Vec::with_capacity(g), Vec::with_capacity(g), Vec::with_capacity(g), Vec::with_capacity(g));
    for j in 0..g {
        let col = sorted_column(m, j);
        mean.push(col.iter().sum::<f64>() / col.len() as f64);
        median.push(quantile_sorted(&col, 0.5));
        lower.push(quantile_sorted(&col, lo_p));
        upper.push(quantile_sorted(&col, hi_p));
    }
    (mean, median, lower, upper)
}

fn param_summary(name: &str, m: &DMatrix<f64>, j: usize, level: f64) -> ParamSummary {
    let col = sorted_column(m, j);
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let var = if col.len() > 1 {
        col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    ParamSummary {
        name: name.to_string(),
        mean,
        sd: var.sqrt(),
        median: quantile_sorted(&col, 0.5),
        lower: quantile_sorted(&col, (1.0 - level) / 2.0),
        upper: quantile_sorted(&col, (1.0 + level) / 2.0),
    }
}

/// Median of a one-dimensional grid posterior: the normalized exponential of
/// the interpolated log marginal is integrated over the node span widened by
/// one adapted standard deviation on each side.
fn interpolated_median(xs: &[f64], fs: &[f64], centre: f64, scale: f64) -> f64 {
    if xs.len() == 1 {
        return xs[0];
    }
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min) - scale;
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) + scale;
    let m = 2001;
    let step = (hi - lo) / (m - 1) as f64;
    let grid: Vec<f64> = (0..m).map(|i| lo + step * i as f64).collect();
    let logd: Vec<f64> = grid
        .iter()
        .map(|&x| interpolate_log_marginal(xs, fs, centre, scale, x))
        .collect();
    let top = logd.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let dens: Vec<f64> = logd.iter().map(|v| (v - top).exp()).collect();
    let mut cdf = vec![0.0; m];
    for i in 1..m {
        cdf[i] = cdf[i - 1] + 0.5 * (dens[i] + dens[i - 1]) * step;
    }
    let half = 0.5 * cdf[m - 1];
    let i = cdf.partition_point(|&c| c < half).clamp(1, m - 1);
    let frac = (half - cdf[i - 1]) / (cdf[i] - cdf[i - 1]);
    grid[i - 1] + frac * step
}

fn weighted_median(values: &[f64], masses: &[f64]) -> f64 {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut acc = 0.0;
    for &i in &idx {
        acc += masses[i];
        if acc >= 0.5 {
            return values[i];
        }
    }
    values[*idx.last().expect("nonempty grid")]
}

fn theta_summaries(hp: &HyperPosterior, names: &[String]) -> Vec<ThetaSummary> {
    let masses = hp.masses();
    let mean = hp.mean();
    (0..hp.dim())
        .map(|i| {
            let values: Vec<f64> = hp.nodes.iter().map(|n| n.theta[i]).collect();
            let var: f64 = values.iter().zip(&masses).map(|(v, m)| m * (v - mean[i]).powi(2)).sum();
            let median = if hp.dim() == 1 {
                let fs: Vec<f64> = hp.nodes.iter().map(|n| n.log_marginal).collect();
                interpolated_median(&values, &fs, hp.theta_hat[0], hp.l_cal[0][0])
            } else {
                weighted_median(&values, &masses)
            };
            ThetaSummary {
                name: names.get(i).cloned().unwrap_or_else(|| format!("theta{i}")),
                mode: hp.theta_hat[i],
                mean: mean[i],
                sd: var.sqrt(),
                median,
                sigma_mode: sigma_from_theta(hp.theta_hat[i]),
                sigma_median: sigma_from_theta(median),
                sigma_mean: values.iter().zip(&masses).map(|(v, m)| m * sigma_from_theta(*v)).sum(),
            }
        })
        .collect()
}
