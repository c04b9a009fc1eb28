//! Synthetic daily-count datasets: baseline trends, day-of-week effects, a
//! spline exposure-response curve and lognormal overdispersion.

mod bspline;

pub use bspline::{eval_exposure_curve, BSplineBasis, ExposureCurveSpec, TwoSidedBasis};

use std::f64::consts::PI;
use std::path::PathBuf;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::DailySeries;

/// Shape of the long-term and seasonal baseline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrendKind {
    #[default]
    None,
    Smooth,
    Rough,
}

/// Log-scale baseline `mu_t`.
///
/// `smooth(t) = a_s sin(2 pi t / 365.25) + a_l (2 s - 1)^3` with `s` the
/// fraction of the study elapsed; `rough` adds `a_h sin(2 pi t / period)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrendSpec {
    pub kind: TrendKind,
    #[serde(default = "default_intercept")]
    pub intercept: f64,
    #[serde(default = "default_seasonal")]
    pub seasonal_amplitude: f64,
    #[serde(default = "default_long_term")]
    pub long_term_amplitude: f64,
    #[serde(default = "default_harmonic")]
    pub harmonic_amplitude: f64,
    #[serde(default = "default_harmonic_period")]
    pub harmonic_period: f64,
}

fn default_intercept() -> f64 {
    100f64.ln()
}
fn default_seasonal() -> f64 {
    0.15
}
fn default_long_term() -> f64 {
    0.1
}
fn default_harmonic() -> f64 {
    0.1
}
fn default_harmonic_period() -> f64 {
    60.0
}

impl TrendSpec {
    pub fn new(kind: TrendKind) -> Self {
        TrendSpec {
            kind,
            intercept: default_intercept(),
            seasonal_amplitude: default_seasonal(),
            long_term_amplitude: default_long_term(),
            harmonic_amplitude: default_harmonic(),
            harmonic_period: default_harmonic_period(),
        }
    }

    /// Baseline at 1-based day `t` of an `n_days` study.
    pub fn log_baseline(&self, t: usize, n_days: usize) -> f64 {
        let tf = t as f64;
        let s = if n_days > 1 {
            (tf - 1.0) / (n_days as f64 - 1.0)
        } else {
            0.0
        };
        let smooth = self.seasonal_amplitude * (2.0 * PI * tf / 365.25).sin()
            + self.long_term_amplitude * (2.0 * s - 1.0).powi(3);
        self.intercept
            + match self.kind {
                TrendKind::None => 0.0,
                TrendKind::Smooth => smooth,
                TrendKind::Rough => smooth + self.harmonic_amplitude * (2.0 * PI * tf / self.harmonic_period).sin(),
            }
    }
}

impl Default for TrendSpec {
    fn default() -> Self {
        TrendSpec::new(TrendKind::None)
    }
}

/// Named overdispersion levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sigma0Level {
    None,
    Moderate,
    Strong,
}

impl Sigma0Level {
    pub fn value(self) -> f64 {
        match self {
            Sigma0Level::None => 0.0,
            Sigma0Level::Moderate => (-3.5f64).exp(),
            Sigma0Level::Strong => (-1.75f64).exp(),
        }
    }
}

/// Standard deviation of the daily effects, as a keyword or a number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sigma0 {
    Level(Sigma0Level),
    Value(f64),
}

impl Sigma0 {
    pub fn value(self) -> f64 {
        match self {
            Sigma0::Level(l) => l.value(),
            Sigma0::Value(v) => v,
        }
    }
}

impl Default for Sigma0 {
    fn default() -> Self {
        Sigma0::Level(Sigma0Level::None)
    }
}

/// Source of the daily exposure series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExposureSource {
    /// Positively skewed stationary series: `exp(log_median + seasonal + AR(1))`
    /// times `scale`.
    Synthetic {
        #[serde(default = "default_exposure_seed")]
        seed: u64,
        #[serde(default = "default_log_median")]
        log_median: f64,
        #[serde(default = "default_log_sd")]
        log_sd: f64,
        #[serde(default = "default_ar")]
        autocorrelation: f64,
        #[serde(default = "default_exposure_seasonal")]
        seasonal_amplitude: f64,
        #[serde(default = "default_scale")]
        scale: f64,
    },
    /// A numeric column of a CSV file, multiplied by `scale`.
    Csv {
        path: PathBuf,
        column: String,
        #[serde(default = "default_scale")]
        scale: f64,
    },
}

fn default_exposure_seed() -> u64 {
    20_240_601
}
fn default_log_median() -> f64 {
    8f64.ln()
}
fn default_log_sd() -> f64 {
    0.5
}
fn default_ar() -> f64 {
    0.7
}
fn default_exposure_seasonal() -> f64 {
    0.2
}
fn default_scale() -> f64 {
    2.0
}

impl Default for ExposureSource {
    fn default() -> Self {
        ExposureSource::Synthetic {
            seed: default_exposure_seed(),
            log_median: default_log_median(),
            log_sd: default_log_sd(),
            autocorrelation: default_ar(),
            seasonal_amplitude: default_exposure_seasonal(),
            scale: default_scale(),
        }
    }
}

/// Everything needed to generate one dataset, apart from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub n_days: usize,
    /// Log-effects from Sunday to Saturday.
    #[serde(default = "default_dow")]
    pub dow_effects: [f64; 7],
    #[serde(default)]
    pub sigma0: Sigma0,
    #[serde(default)]
    pub trend: TrendSpec,
    #[serde(default = "ExposureCurveSpec::standard")]
    pub curve: ExposureCurveSpec,
    #[serde(default)]
    pub exposure: ExposureSource,
    /// Date of day 1.
    #[serde(default = "default_start")]
    pub start_date: NaiveDate,
    /// Name of the exposure column in generated data.
    #[serde(default = "default_exposure_name")]
    pub exposure_name: String,
}

fn default_dow() -> [f64; 7] {
    [0.0, 0.2, 0.3, 0.3, 0.25, 0.2, 0.05]
}
fn default_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(1996, 1, 7).expect("valid date")
}
fn default_exposure_name() -> String {
    "pm25".into()
}

impl GenConfig {
    pub fn new(n_days: usize) -> Self {
        GenConfig {
            n_days,
            dow_effects: default_dow(),
            sigma0: Sigma0::default(),
            trend: TrendSpec::default(),
            curve: ExposureCurveSpec::standard(),
            exposure: ExposureSource::default(),
            start_date: default_start(),
            exposure_name: default_exposure_name(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_days == 0 {
            return Err(Error::invalid("n_days must be positive"));
        }
        let s = self.sigma0.value();
        if !(s >= 0.0 && s.is_finite()) {
            return Err(Error::invalid(format!("sigma0 must be nonnegative, got {s}")));
        }
        if self.dow_effects.iter().any(|v| !v.is_finite()) || !self.trend.intercept.is_finite() {
            return Err(Error::invalid("day-of-week effects and intercept must be finite"));
        }
        Ok(())
    }
}

/// Components of the generating log-mean, for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub sigma0: f64,
    pub curve: ExposureCurveSpec,
    pub exposure_name: String,
    pub log_baseline: Vec<f64>,
    pub dow: Vec<f64>,
    pub curve_values: Vec<f64>,
    pub z: Vec<f64>,
    pub log_mean: Vec<f64>,
}

impl Truth {
    /// Recomputes the log-mean from its stored components.
    pub fn recomputed_log_mean(&self) -> Vec<f64> {
        (0..self.log_mean.len())
            .map(|t| self.log_baseline[t] + self.dow[t] + self.curve_values[t] + self.z[t])
            .collect()
    }

    pub fn curve_at(&self, exposure: &[f64]) -> Result<Vec<f64>> {
        eval_exposure_curve(exposure, &self.curve)
    }
}

/// Generates the exposure series of `config` (independent of the dataset seed).
pub fn exposure_series(config: &GenConfig) -> Result<Vec<f64>> {
    let n = config.n_days;
    match &config.exposure {
        ExposureSource::Synthetic {
            seed,
            log_median,
            log_sd,
            autocorrelation,
            seasonal_amplitude,
            scale,
        } => {
            if !(autocorrelation.abs() < 1.0) || !(*log_sd >= 0.0) {
                return Err(Error::invalid("synthetic exposure needs |autocorrelation| < 1 and log_sd >= 0"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let innovation = Normal::new(0.0, log_sd * (1.0 - autocorrelation * autocorrelation).sqrt())
                .map_err(|e| Error::invalid(e.to_string()))?;
            let mut x = Normal::new(0.0, *log_sd)
                .map_err(|e| Error::invalid(e.to_string()))?
                .sample(&mut rng);
            let mut out = Vec::with_capacity(n);
            for t in 1..=n {
                if t > 1 {
                    x = autocorrelation * x + innovation.sample(&mut rng);
                }
                let seasonal = seasonal_amplitude * (2.0 * PI * t as f64 / 365.25 + 0.5 * PI).sin();
                out.push(scale * (log_median + seasonal + x).exp());
            }
            Ok(out)
        }
        ExposureSource::Csv { path, column, scale } => {
            let file = std::fs::File::open(path)?;
            let data = DailySeries::read_csv(file)?;
            let values = data.covariate(column)?;
            if values.len() < n {
                return Err(Error::invalid(format!(
                    "exposure series has {} days but n_days is {n}",
                    values.len()
                )));
            }
            if values[..n].iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("exposure series has missing values"));
            }
            Ok(values[..n].iter().map(|v| v * scale).collect())
        }
    }
}

/// Draws one dataset: `log mean_t = baseline(t) + dow(t) + f(pm_t) + Z_t`,
/// `Z_t ~ N(0, sigma0^2)`, `Y_t ~ Poisson(exp(log mean_t))`.
pub fn generate_series(config: &GenConfig, exposure: &[f64], rng: &mut impl Rng) -> Result<(DailySeries, Truth)> {
    config.validate()?;
    let n = config.n_days;
    if exposure.len() < n {
        return Err(Error::invalid("exposure series is shorter than n_days"));
    }
    let exposure = &exposure[..n];
    let curve_values = eval_exposure_curve(exposure, &config.curve)?;
    let series_calendar = DailySeries::new(vec![0; n]).with_start_date(config.start_date);
    let sigma0 = config.sigma0.value();
    let mut log_baseline = Vec::with_capacity(n);
    let mut dow = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    let mut log_mean = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let normal = Normal::new(0.0, sigma0).map_err(|e| Error::invalid(e.to_string()))?;
    for t in 1..=n {
        let b = config.trend.log_baseline(t, n);
        let d = config.dow_effects[series_calendar.weekday(t).num_days_from_sunday() as usize];
        let zt = if sigma0 > 0.0 { normal.sample(rng) } else { 0.0 };
        let lm = b + d + curve_values[t - 1] + zt;
        if lm > 30.0 || !lm.is_finite() {
            return Err(Error::invalid(format!(
                "log-mean {lm} on day {t} exceeds 30; lower the intercept (currently {}) or the effects",
                config.trend.intercept
            )));
        }
        let count = Poisson::new(lm.exp())
            .map_err(|e| Error::invalid(e.to_string()))?
            .sample(rng) as u64;
        log_baseline.push(b);
        dow.push(d);
        z.push(zt);
        log_mean.push(lm);
        y.push(count);
    }
    let series = DailySeries::new(y)
        .with_covariate(config.exposure_name.clone(), exposure.to_vec())?
        .with_start_date(config.start_date);
    let truth = Truth {
        sigma0,
        curve: config.curve.clone(),
        exposure_name: config.exposure_name.clone(),
        log_baseline,
        dow,
        curve_values,
        z,
        log_mean,
    };
    Ok((series, truth))
}

/// Random stream for replication `index` derived from a master seed.
pub fn replication_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index + 1);
    rng
}

/// Trailing moving average over `lags` days; the first `lags - 1` entries
/// (and windows with missing values) are `None`.
pub fn lagged_average(series: &[f64], lags: usize) -> Result<Vec<Option<f64>>> {
    if lags == 0 {
        return Err(Error::invalid("lags must be at least 1"));
    }
    Ok((0..series.len())
        .map(|t| {
            if t + 1 < lags {
                return None;
            }
            let window = &series[t + 1 - lags..=t];
            if window.iter().any(|v| !v.is_finite()) {
                None
            } else {
                Some(window.iter().sum::<f64>() / lags as f64)
            }
        })
        .collect())
}
