//! The latent Gaussian field `W = (beta, gamma, Z)`, its priors and the
//! second-order random-walk structure of binned exposure-response curves.
//!
//! Hyperparameters are log-precisions: `sigma_j^2 = exp(-theta_j)`. When
//! overdispersion is on, `theta[0]` is `theta_0` (the daily effects) and the
//! random-walk log-precisions follow; otherwise only the random-walk ones are
//! present.

use std::f64::consts::LN_2;
use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::SymBand;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Monotone map applied to a covariate before binning.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    #[default]
    None,
    Sqrt,
}

impl Transform {
    pub fn apply(self, x: f64) -> Result<f64> {
        match self {
            Transform::None => Ok(x),
            Transform::Sqrt if x >= 0.0 => Ok(x.sqrt()),
            Transform::Sqrt => Err(Error::invalid(format!(
                "square-root transform of negative value {x}"
            ))),
        }
    }

    pub fn inverse(self, y: f64) -> f64 {
        match self {
            Transform::None => y,
            Transform::Sqrt => y * y,
        }
    }
}

/// A covariate entering through a binned RW(2) exposure-response curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rw2EffectSpec {
    pub covariate: String,
    #[serde(default)]
    pub transform: Transform,
    /// Bin width on the transformed scale.
    pub bin_width: f64,
    /// Reference value `u*` on the transformed scale; the curve is zero there.
    pub reference: f64,
}

/// A covariate entering through the two-sided reference spline basis used by
/// the simulator (fixed-effect regression splines pinned at the reference).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplineEffectSpec {
    pub covariate: String,
}

/// Prior hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    /// Precision of the independent Gaussian priors on fixed effects.
    #[serde(default = "default_beta_precision")]
    pub beta_precision: f64,
    /// Shape of the gamma prior on `exp(theta_0)`.
    #[serde(default = "default_theta0_shape")]
    pub theta0_shape: f64,
    /// Rate of the gamma prior on `exp(theta_0)`.
    #[serde(default = "default_theta0_rate")]
    pub theta0_rate: f64,
    /// Prior median of each random-walk standard deviation (exponential prior).
    #[serde(default)]
    pub sigma_medians: Vec<f64>,
}

fn default_beta_precision() -> f64 {
    0.01
}
fn default_theta0_shape() -> f64 {
    0.5
}
fn default_theta0_rate() -> f64 {
    1e-7
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            beta_precision: default_beta_precision(),
            theta0_shape: default_theta0_shape(),
            theta0_rate: default_theta0_rate(),
            sigma_medians: Vec::new(),
        }
    }
}

impl PriorSpec {
    pub fn validate(&self, n_rw2: usize) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("priors.{name} must be positive, got {v}")))
            }
        };
        positive("beta_precision", self.beta_precision)?;
        positive("theta0_shape", self.theta0_shape)?;
        positive("theta0_rate", self.theta0_rate)?;
        if self.sigma_medians.len() != n_rw2 {
            return Err(Error::invalid(format!(
                "priors.sigma_medians has {} entries but the model has {n_rw2} RW(2) effects",
                self.sigma_medians.len()
            )));
        }
        for &m in &self.sigma_medians {
            positive("sigma_medians", m)?;
        }
        Ok(())
    }
}

/// Full model description, serialized as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Covariate columns entering linearly.
    #[serde(default)]
    pub fixed_effects: Vec<String>,
    #[serde(default)]
    pub spline_effects: Vec<SplineEffectSpec>,
    #[serde(default)]
    pub rw2_effects: Vec<Rw2EffectSpec>,
    #[serde(default)]
    pub priors: PriorSpec,
    /// Include the daily overdispersion effects `Z`.
    pub overdispersion: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.priors.validate(self.rw2_effects.len())?;
        for e in &self.rw2_effects {
            if !(e.bin_width > 0.0 && e.bin_width.is_finite()) {
                return Err(Error::invalid(format!(
                    "rw2 effect on {:?}: bin_width must be positive",
                    e.covariate
                )));
            }
            if !e.reference.is_finite() {
                return Err(Error::invalid(format!(
                    "rw2 effect on {:?}: reference must be finite",
                    e.covariate
                )));
            }
        }
        if self.fixed_effects.is_empty() && self.spline_effects.is_empty() && self.rw2_effects.is_empty() {
            return Err(Error::invalid("model has no covariate effects"));
        }
        Ok(())
    }

    pub fn n_theta(&self) -> usize {
        self.rw2_effects.len() + usize::from(self.overdispersion)
    }
}

/// Equal-width bins over a (transformed) covariate.
///
/// Bins are left-closed and right-open; the lattice is anchored so that the
/// reference value sits at a bin midpoint, and it covers both the data range
/// and the reference value.
#[derive(Debug, Clone, PartialEq)]
pub struct Binning {
    pub origin: f64,
    pub width: f64,
    pub n_bins: usize,
    /// 0-based bin of each observation.
    pub index: Vec<usize>,
    /// 0-based bin holding the reference value.
    pub reference_bin: usize,
    /// Observations per bin.
    pub counts: Vec<usize>,
    /// Transformed values.
    pub values: Vec<f64>,
}

impl Binning {
    pub fn midpoint(&self, bin: usize) -> f64 {
        self.origin + (bin as f64 + 0.5) * self.width
    }

    pub fn midpoints(&self) -> Vec<f64> {
        (0..self.n_bins).map(|b| self.midpoint(b)).collect()
    }
}

pub fn bin_covariate(values: &[f64], spec: &Rw2EffectSpec) -> Result<Binning> {
    let width = spec.bin_width;
    if !(width > 0.0 && width.is_finite()) {
        return Err(Error::invalid("bin width must be positive"));
    }
    let transformed = values
        .iter()
        .map(|&v| {
            if !v.is_finite() {
                return Err(Error::invalid(format!(
                    "covariate {:?} has a non-finite value",
                    spec.covariate
                )));
            }
            spec.transform.apply(v)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (min, max) = transformed
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if transformed.is_empty() || max <= min {
        return Err(Error::invalid(format!(
            "covariate {:?} is constant after transformation",
            spec.covariate
        )));
    }
    let reference = spec.reference;
    let lo = min.min(reference);
    let hi = max.max(reference);
    let first_edge = reference - 0.5 * width;
    let origin = first_edge - width * ((first_edge - lo) / width).ceil();
    let locate = |v: f64| ((v - origin) / width).floor().max(0.0) as usize;
    let n_bins = locate(hi) + 1;
    let index: Vec<usize> = transformed.iter().map(|&v| locate(v).min(n_bins - 1)).collect();
    let mut counts = vec![0; n_bins];
    for &b in &index {
        counts[b] += 1;
    }
    Ok(Binning {
        origin,
        width,
        n_bins,
        index,
        reference_bin: locate(reference).min(n_bins - 1),
        counts,
        values: transformed,
    })
}

/// Structure matrix `D'D` of a second-order random walk on `k` levels, with
/// `D` the `(k-2) x k` second-difference operator.
pub fn rw2_precision(k: usize) -> Result<SymBand> {
    if k < 3 {
        return Err(Error::invalid(format!("RW(2) needs at least 3 levels, got {k}")));
    }
    let mut q = SymBand::zeros(k, 2);
    let row = [1.0, -2.0, 1.0];
    for r in 0..k - 2 {
        for a in 0..3 {
            for b in 0..=a {
                q.add(r + a, r + b, row[a] * row[b]);
            }
        }
    }
    Ok(q)
}

/// Identifiability constraint of one RW(2) effect: two adjacent levels are
/// pinned to zero and a slope on `u - u*` enters the fixed effects.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rw2Constraint {
    pub n_bins: usize,
    /// The two pinned (0-based) bins.
    pub pinned: (usize, usize),
}

impl Rw2Constraint {
    /// Position of `bin` in the constrained vector, `None` for pinned bins.
    pub fn free_index(&self, bin: usize) -> Option<usize> {
        let (a, b) = self.pinned;
        if bin == a || bin == b {
            None
        } else if bin < a {
            Some(bin)
        } else {
            Some(bin - 2)
        }
    }

    pub fn n_free(&self) -> usize {
        self.n_bins - 2
    }
}

/// Removes rows/columns `k` and `k+1` (0-based `reference_bin`; the last bin
/// pins the final two levels instead) and returns the positive definite
/// constrained precision.
pub fn constrain_rw2(q: &SymBand, reference_bin: usize) -> Result<(SymBand, Rw2Constraint)> {
    let n = q.n();
    if reference_bin >= n {
        return Err(Error::invalid(format!(
            "reference bin {reference_bin} out of range for {n} bins"
        )));
    }
    let first = if reference_bin + 1 == n { n - 2 } else { reference_bin };
    let constrained = q.remove_rows_cols(&[first, first + 1]);
    Ok((
        constrained,
        Rw2Constraint {
            n_bins: n,
            pinned: (first, first + 1),
        },
    ))
}

/// One constrained RW(2) block of the latent field.
#[derive(Debug, Clone)]
pub struct Rw2Block {
    /// Offset of the block within `gamma`.
    pub offset: usize,
    pub precision: SymBand,
    pub log_det: f64,
    pub constraint: Rw2Constraint,
}

impl Rw2Block {
    pub fn new(offset: usize, n_bins: usize, reference_bin: usize) -> Result<Self> {
        let (precision, constraint) = constrain_rw2(&rw2_precision(n_bins)?, reference_bin)?;
        let log_det = precision
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("constrained RW(2) structure"))?
            .log_det();
        Ok(Rw2Block {
            offset,
            precision,
            log_det,
            constraint,
        })
    }

    pub fn dim(&self) -> usize {
        self.precision.n()
    }
}

/// Dimensions and prior structure of `W = (beta, gamma, Z)`.
#[derive(Debug, Clone)]
pub struct LatentStructure {
    pub n_beta: usize,
    pub rw2: Vec<Rw2Block>,
    pub n_days: usize,
    pub overdispersion: bool,
}

impl LatentStructure {
    pub fn n_gamma(&self) -> usize {
        self.rw2.iter().map(Rw2Block::dim).sum()
    }

    /// Size of the dense part `(beta, gamma)`.
    pub fn n_dense(&self) -> usize {
        self.n_beta + self.n_gamma()
    }

    pub fn n_z(&self) -> usize {
        if self.overdispersion {
            self.n_days
        } else {
            0
        }
    }

    /// `dim(W)`.
    pub fn dim(&self) -> usize {
        self.n_dense() + self.n_z()
    }

    pub fn n_theta(&self) -> usize {
        self.rw2.len() + usize::from(self.overdispersion)
    }

    pub fn beta_range(&self) -> Range<usize> {
        0..self.n_beta
    }

    pub fn gamma_range(&self, effect: usize) -> Range<usize> {
        let start = self.n_beta + self.rw2[effect].offset;
        start..start + self.rw2[effect].dim()
    }

    pub fn z_range(&self) -> Range<usize> {
        self.n_dense()..self.dim()
    }

    /// Index of `theta_j` for RW(2) effect `effect` (0-based).
    pub fn theta_index(&self, effect: usize) -> usize {
        effect + usize::from(self.overdispersion)
    }

    fn check(&self, w: &[f64], theta: &[f64]) -> Result<()> {
        if w.len() != self.dim() || theta.len() != self.n_theta() {
            return Err(Error::invalid(format!(
                "latent dimension mismatch: W has {} (expected {}), theta has {} (expected {})",
                w.len(),
                self.dim(),
                theta.len(),
                self.n_theta()
            )));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("hyperparameters"));
        }
        Ok(())
    }

    /// Log density of `W | theta`, normalizing constants included.
    pub fn log_density(&self, w: &[f64], theta: &[f64], priors: &PriorSpec) -> Result<f64> {
        self.check(w, theta)?;
        let tau = priors.beta_precision;
        let beta = &w[self.beta_range()];
        let mut total = 0.5 * self.n_beta as f64 * (tau.ln() - LN_2PI)
            - 0.5 * tau * beta.iter().map(|b| b * b).sum::<f64>();
        for (j, block) in self.rw2.iter().enumerate() {
            let t = theta[self.theta_index(j)];
            let g = &w[self.gamma_range(j)];
            let d = block.dim() as f64;
            total += 0.5 * d * (t - LN_2PI) + 0.5 * block.log_det - 0.5 * t.exp() * block.precision.quad_form(g);
        }
        if self.overdispersion {
            let t0 = theta[0];
            let z = &w[self.z_range()];
            total += 0.5 * self.n_days as f64 * (t0 - LN_2PI) - 0.5 * t0.exp() * z.iter().map(|v| v * v).sum::<f64>();
        }
        if total.is_finite() {
            Ok(total)
        } else {
            Err(Error::NonFinite("latent prior log density"))
        }
    }

    /// Gradient of [`Self::log_density`] in `W`.
    pub fn log_density_gradient(&self, w: &[f64], theta: &[f64], priors: &PriorSpec) -> Vec<f64> {
        let mut grad = vec![0.0; self.dim()];
        for i in self.beta_range() {
            grad[i] = -priors.beta_precision * w[i];
        }
        for (j, block) in self.rw2.iter().enumerate() {
            let range = self.gamma_range(j);
            let scale = theta[self.theta_index(j)].exp();
            let qg = block.precision.mul_vec(&w[range.clone()]);
            for (k, v) in range.zip(qg) {
                grad[k] = -scale * v;
            }
        }
        if self.overdispersion {
            let p = theta[0].exp();
            for i in self.z_range() {
                grad[i] = -p * w[i];
            }
        }
        grad
    }

    /// Prior precision of the dense block `(beta, gamma)`.
    pub fn dense_precision(&self, theta: &[f64], priors: &PriorSpec) -> DMatrix<f64> {
        let m = self.n_dense();
        let mut p = DMatrix::zeros(m, m);
        for i in 0..self.n_beta {
            p[(i, i)] = priors.beta_precision;
        }
        for (j, block) in self.rw2.iter().enumerate() {
            let scale = theta[self.theta_index(j)].exp();
            let start = self.n_beta + block.offset;
            let d = block.dim();
            for a in 0..d {
                for b in a.saturating_sub(2)..=a {
                    let v = scale * block.precision.get(a, b);
                    p[(start + a, start + b)] = v;
                    p[(start + b, start + a)] = v;
                }
            }
        }
        p
    }

    /// Prior precision `exp(theta_0)` of each daily effect.
    pub fn z_precision(&self, theta: &[f64]) -> f64 {
        if self.overdispersion {
            theta[0].exp()
        } else {
            0.0
        }
    }
}

/// The latent field split into its named components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentField {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Empty when overdispersion is off.
    pub z: Vec<f64>,
}

impl LatentField {
    pub fn split(structure: &LatentStructure, w: &[f64]) -> Self {
        let nb = structure.n_beta;
        let nd = structure.n_dense();
        LatentField {
            beta: w[..nb].to_vec(),
            gamma: w[nb..nd].to_vec(),
            z: w[nd..].to_vec(),
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.beta.iter().chain(&self.gamma).chain(&self.z).copied().collect()
    }
}

/// `log pi(W | theta)`.
pub fn latent_prior_logdensity(
    w: &LatentField,
    theta: &[f64],
    priors: &PriorSpec,
    structure: &LatentStructure,
) -> Result<f64> {
    structure.log_density(&w.to_vec(), theta, priors)
}

/// Log density of `theta_0` when `exp(theta_0) ~ Gamma(shape, rate)`.
pub fn log_gamma_theta_logdensity(theta: f64, shape: f64, rate: f64) -> f64 {
    shape * theta - rate * theta.exp() + shape * rate.ln() - ln_gamma(shape)
}

/// Rate of the exponential prior whose median is `median`.
pub fn exponential_rate_from_median(median: f64) -> f64 {
    LN_2 / median
}

/// Log density of `theta = -2 log sigma` induced by `sigma ~ Exp(rate)`.
pub fn exp_sd_theta_logdensity(theta: f64, rate: f64) -> f64 {
    (0.5 * rate).ln() - rate * (-0.5 * theta).exp() - 0.5 * theta
}

/// `log pi(theta)`: log-gamma prior on `theta_0` (when present) and
/// exponential-on-sigma priors on the random-walk log-precisions.
pub fn hyper_prior_logdensity(theta: &[f64], priors: &PriorSpec, overdispersion: bool) -> Result<f64> {
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("hyperparameters"));
    }
    let offset = usize::from(overdispersion);
    if theta.len() != priors.sigma_medians.len() + offset {
        return Err(Error::invalid("hyperparameter vector length does not match the priors"));
    }
    let mut total = 0.0;
    if overdispersion {
        total += log_gamma_theta_logdensity(theta[0], priors.theta0_shape, priors.theta0_rate);
    }
    for (t, &median) in theta[offset..].iter().zip(&priors.sigma_medians) {
        total += exp_sd_theta_logdensity(*t, exponential_rate_from_median(median));
    }
    Ok(total)
}

/// `theta` value whose `sigma = exp(-theta/2)` equals `sigma`.
pub fn theta_from_sigma(sigma: f64) -> f64 {
    -2.0 * sigma.ln()
}

pub fn sigma_from_theta(theta: f64) -> f64 {
    (-0.5 * theta).exp()
}
