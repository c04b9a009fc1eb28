//! Conditional Poisson partial likelihood of daily counts given a
//! reference-frame design, its equivalent conditional logistic and
//! multinomial forms, and variance diagnostics for overdispersion.
//!
//! Linear predictors `eta` are 0-based vectors (`eta[t - 1]` is day `t`);
//! frames hold 1-based day indices.

mod design;
mod series;

pub use design::{CurveKind, CurveTerm, Design, DesignOptions};
pub use series::DailySeries;

use nalgebra::DMatrix;
use rayon::prelude::*;
use statrs::function::factorial::ln_factorial;

use crate::error::{Error, Result};
use crate::frames::ReferenceFrameSet;

/// `ln sum exp(x)` with max subtraction.
pub fn log_sum_exp<I: IntoIterator<Item = f64> + Clone>(values: I) -> f64 {
    let max = values.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.into_iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Curvature `C = diag(d) - sum_k w_k p_k p_k'` of a log-likelihood in `eta`;
/// the Hessian is `-C`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankOneTerm {
    /// 0-based days supporting `probs`.
    pub members: Vec<usize>,
    pub weight: f64,
    pub probs: Vec<f64>,
}

/// Gradient and Hessian of a log-likelihood with respect to `eta`.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaDerivatives {
    pub gradient: Vec<f64>,
    pub curvature_diag: Vec<f64>,
    pub rank_one: Vec<RankOneTerm>,
}

impl EtaDerivatives {
    /// Dense Hessian of the log-likelihood.
    pub fn hessian_dense(&self) -> DMatrix<f64> {
        let n = self.gradient.len();
        let mut h = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            n,
            self.curvature_diag.iter().map(|d| -d),
        ));
        for term in &self.rank_one {
            for (a, &i) in term.members.iter().enumerate() {
                for (b, &j) in term.members.iter().enumerate() {
                    h[(i, j)] += term.weight * term.probs[a] * term.probs[b];
                }
            }
        }
        h
    }

    /// Hessian block of one rank-one term (including its share of the
    /// diagonal), `-w (diag p - p p')`.
    pub fn term_block(term: &RankOneTerm) -> DMatrix<f64> {
        let m = term.members.len();
        DMatrix::from_fn(m, m, |a, b| {
            let diag = if a == b { term.probs[a] } else { 0.0 };
            -term.weight * (diag - term.probs[a] * term.probs[b])
        })
    }
}

/// A log-likelihood of the daily linear predictor.
pub trait EtaLikelihood: Send + Sync {
    fn n_days(&self) -> usize;
    fn log_lik(&self, eta: &[f64]) -> Result<f64>;
    fn derivatives(&self, eta: &[f64]) -> Result<EtaDerivatives>;
    /// Groups of 0-based days whose Hessian entries may be nonzero; the
    /// diagonal is always assumed present.
    fn coupling(&self) -> Vec<Vec<usize>>;
}

fn check_eta(eta: &[f64], n: usize) -> Result<()> {
    if eta.len() != n {
        return Err(Error::invalid(format!(
            "linear predictor has length {} for {n} days",
            eta.len()
        )));
    }
    if eta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("linear predictor"));
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct Stratum {
    members: Vec<usize>,
    /// 0-based case days mapped to this frame and their counts.
    cases: Vec<(usize, f64)>,
    total: f64,
}

/// Conditional Poisson likelihood bound to counts and a frame set.
///
/// Counts on days that belong to no frame (for instance excluded holidays)
/// do not contribute.
#[derive(Debug, Clone)]
pub struct CondPoisson {
    y: Vec<f64>,
    strata: Vec<Stratum>,
    dropped_cases: u64,
}

impl CondPoisson {
    pub fn new(y: &[u64], frames: &ReferenceFrameSet) -> Result<Self> {
        let n = frames.n_days();
        if y.len() != n {
            return Err(Error::invalid(format!(
                "{} counts for a frame set over {n} days",
                y.len()
            )));
        }
        let mut cases: Vec<Vec<(usize, f64)>> = vec![Vec::new(); frames.n_frames()];
        let mut y_eff = vec![0.0; n];
        let mut dropped_cases = 0;
        for (t, &count) in y.iter().enumerate() {
            match frames.frame_of(t + 1) {
                Some(k) => {
                    y_eff[t] = count as f64;
                    if count > 0 {
                        cases[k].push((t, count as f64));
                    }
                }
                None => dropped_cases += count,
            }
        }
        let strata = frames
            .frames()
            .iter()
            .zip(cases)
            .filter(|(_, c)| !c.is_empty())
            .map(|(members, cases)| Stratum {
                members: members.iter().map(|d| d - 1).collect(),
                total: cases.iter().map(|c| c.1).sum(),
                cases,
            })
            .collect();
        Ok(CondPoisson {
            y: y_eff,
            strata,
            dropped_cases,
        })
    }

    /// Cases on days outside every frame.
    pub fn dropped_cases(&self) -> u64 {
        self.dropped_cases
    }

    fn stratum_lse(s: &Stratum, eta: &[f64]) -> f64 {
        log_sum_exp(s.members.iter().map(|&i| eta[i]))
    }

    fn stratum_log_lik(s: &Stratum, eta: &[f64]) -> f64 {
        let lse = Self::stratum_lse(s, eta);
        s.cases.iter().map(|&(t, y)| y * (eta[t] - lse)).sum()
    }

    /// Same value as [`EtaLikelihood::log_lik`], with per-stratum terms
    /// evaluated in parallel.
    pub fn log_lik_parallel(&self, eta: &[f64]) -> Result<f64> {
        check_eta(eta, self.y.len())?;
        Ok(self
            .strata
            .par_iter()
            .map(|s| Self::stratum_log_lik(s, eta))
            .sum())
    }
}

impl EtaLikelihood for CondPoisson {
    fn n_days(&self) -> usize {
        self.y.len()
    }

    fn log_lik(&self, eta: &[f64]) -> Result<f64> {
        check_eta(eta, self.y.len())?;
        Ok(self.strata.iter().map(|s| Self::stratum_log_lik(s, eta)).sum())
    }

    fn derivatives(&self, eta: &[f64]) -> Result<EtaDerivatives> {
        check_eta(eta, self.y.len())?;
        let mut gradient = self.y.clone();
        let mut curvature_diag = vec![0.0; self.y.len()];
        let mut rank_one = Vec::with_capacity(self.strata.len());
        for s in &self.strata {
            let lse = Self::stratum_lse(s, eta);
            let probs: Vec<f64> = s.members.iter().map(|&i| (eta[i] - lse).exp()).collect();
            for (&i, &p) in s.members.iter().zip(&probs) {
                gradient[i] -= s.total * p;
                curvature_diag[i] += s.total * p;
            }
            if s.members.len() > 1 {
                rank_one.push(RankOneTerm {
                    members: s.members.clone(),
                    weight: s.total,
                    probs,
                });
            } else {
                // Singleton: diag and rank-one parts cancel exactly.
                curvature_diag[s.members[0]] -= s.total * probs[0] * probs[0];
            }
        }
        Ok(EtaDerivatives {
            gradient,
            curvature_diag,
            rank_one,
        })
    }

    fn coupling(&self) -> Vec<Vec<usize>> {
        self.strata
            .iter()
            .filter(|s| s.members.len() > 1)
            .map(|s| s.members.clone())
            .collect()
    }
}

/// Gaussian observations `y_t ~ N(eta_t, sd^2)`; a fully Gaussian stand-in
/// used to check the Laplace machinery.
#[derive(Debug, Clone)]
pub struct GaussianLikelihood {
    pub y: Vec<f64>,
    pub sd: f64,
}

impl EtaLikelihood for GaussianLikelihood {
    fn n_days(&self) -> usize {
        self.y.len()
    }

    fn log_lik(&self, eta: &[f64]) -> Result<f64> {
        check_eta(eta, self.y.len())?;
        let var = self.sd * self.sd;
        Ok(self
            .y
            .iter()
            .zip(eta)
            .map(|(y, e)| -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (y - e).powi(2) / (2.0 * var))
            .sum())
    }

    fn derivatives(&self, eta: &[f64]) -> Result<EtaDerivatives> {
        check_eta(eta, self.y.len())?;
        let prec = 1.0 / (self.sd * self.sd);
        Ok(EtaDerivatives {
            gradient: self.y.iter().zip(eta).map(|(y, e)| (y - e) * prec).collect(),
            curvature_diag: vec![prec; self.y.len()],
            rank_one: Vec::new(),
        })
    }

    fn coupling(&self) -> Vec<Vec<usize>> {
        Vec::new()
    }
}

fn require_framed_cases(y: &[u64], frames: &ReferenceFrameSet) -> Result<()> {
    if let Some(t) = (0..y.len()).find(|&t| y[t] > 0 && frames.frame_of(t + 1).is_none()) {
        return Err(Error::invalid(format!("day {} has cases but no reference frame", t + 1)));
    }
    Ok(())
}

/// `sum_t Y_t (eta_t - log sum_{s in T(t)} exp(eta_s))`.
pub fn cond_poisson_loglik(y: &[u64], eta: &[f64], frames: &ReferenceFrameSet) -> Result<f64> {
    require_framed_cases(y, frames)?;
    CondPoisson::new(y, frames)?.log_lik(eta)
}

/// Gradient and Hessian of [`cond_poisson_loglik`] in `eta`.
pub fn cond_poisson_grad_hess(y: &[u64], eta: &[f64], frames: &ReferenceFrameSet) -> Result<EtaDerivatives> {
    require_framed_cases(y, frames)?;
    CondPoisson::new(y, frames)?.derivatives(eta)
}

/// Conditional logistic form over individual (1-based) case days.
pub fn cond_logistic_loglik(case_days: &[usize], eta: &[f64], frames: &ReferenceFrameSet) -> Result<f64> {
    check_eta(eta, frames.n_days())?;
    let mut total = 0.0;
    for &t in case_days {
        let frame = frames
            .frame_for_day(t)
            .filter(|f| f.contains(&t))
            .ok_or_else(|| Error::invalid(format!("case day {t} is not in its reference frame")))?;
        total += eta[t - 1] - log_sum_exp(frame.iter().map(|&s| eta[s - 1]));
    }
    Ok(total)
}

/// Per-frame count vectors aligned with frame members: the count of day `s`
/// in frame `k` is `Y_s` when `s` maps to `k` and zero otherwise.
pub fn stratum_counts(y: &[u64], frames: &ReferenceFrameSet) -> Vec<Vec<u64>> {
    frames
        .frames()
        .iter()
        .enumerate()
        .map(|(k, members)| {
            members
                .iter()
                .map(|&s| if frames.frame_of(s) == Some(k) { y[s - 1] } else { 0 })
                .collect()
        })
        .collect()
}

/// `ln(N! / prod n_i!)`.
pub fn log_multinomial_coefficient(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    ln_factorial(total) - counts.iter().map(|&n| ln_factorial(n)).sum::<f64>()
}

/// Multinomial form: `sum_k sum_t N_kt log Delta_kt + sum_k log multinomial coefficient`.
pub fn multinomial_loglik(counts: &[Vec<u64>], eta: &[f64], frames: &ReferenceFrameSet) -> Result<f64> {
    check_eta(eta, frames.n_days())?;
    if counts.len() != frames.n_frames() {
        return Err(Error::invalid("one count vector per frame is required"));
    }
    let mut total = 0.0;
    for (members, n) in frames.frames().iter().zip(counts) {
        if n.len() != members.len() {
            return Err(Error::invalid("count vector length differs from its frame size"));
        }
        if n.iter().all(|&c| c == 0) {
            continue;
        }
        let lse = log_sum_exp(members.iter().map(|&s| eta[s - 1]));
        for (&s, &c) in members.iter().zip(n) {
            if c > 0 {
                total += c as f64 * (eta[s - 1] - lse);
            }
        }
        total += log_multinomial_coefficient(n);
    }
    Ok(total)
}

/// `Var(Y | eta~) = E [1 + E (exp(sigma0^2) - 1)]` for a Poisson-lognormal count
/// with mean `E`.
pub fn poisson_lognormal_variance(mean: f64, sigma0: f64) -> Result<f64> {
    if !(mean >= 0.0 && mean.is_finite()) || !(sigma0 >= 0.0 && sigma0.is_finite()) {
        return Err(Error::invalid("mean and sigma0 must be finite and nonnegative"));
    }
    Ok(mean * (1.0 + mean * (sigma0 * sigma0).exp_m1()))
}

/// First-order variance of a frame count under a multinomial logistic model
/// with random effects: `N p (1-p) [1 + sigma0^2 (N-1) p (1-p)]`.
pub fn multinomial_od_variance(n_bar: u64, delta: f64, sigma0: f64) -> Result<f64> {
    if n_bar < 1 || !(delta > 0.0 && delta < 1.0) || !(sigma0 >= 0.0 && sigma0.is_finite()) {
        return Err(Error::invalid("need N >= 1, 0 < delta < 1 and sigma0 >= 0"));
    }
    let n = n_bar as f64;
    let v = delta * (1.0 - delta);
    Ok(n * v * (1.0 + sigma0 * sigma0 * (n - 1.0) * v))
}
