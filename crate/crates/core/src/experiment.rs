//! Simulation replications: generate, fit, and score a curve against the
//! generating truth.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{coverage_report, erl_envelope, CoverageReport, ReplicationCurve};
use crate::frames::{build_design, CalendarMask, DesignKind, ExclusionPolicy, ReferenceFrameSet};
use crate::inference::{fit, FitOptions, FitResult, ThetaSummary};
use crate::latent::ModelSpec;
use crate::likelihood::DailySeries;
use crate::simgen::{exposure_series, generate_series, replication_rng, GenConfig, Truth};

/// How reference frames are built from a series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSpec {
    pub design: DesignKind,
    pub control_days: usize,
    #[serde(default)]
    pub exclusion: ExclusionPolicy,
}

impl FrameSpec {
    pub fn time_stratified(control_days: usize) -> Self {
        FrameSpec {
            design: DesignKind::TimeStratified,
            control_days,
            exclusion: ExclusionPolicy::default(),
        }
    }

    /// Frames over `series`, with days in `mask` or with missing values in
    /// `columns` excluded.
    pub fn build(&self, series: &DailySeries, mask: &CalendarMask, columns: &[&str]) -> Result<ReferenceFrameSet> {
        let incomplete = series.incomplete_days(columns)?;
        let excluded: Vec<usize> = mask.excluded().chain(incomplete).collect();
        let full = CalendarMask::with_excluded(series.n_days(), excluded)?.with_first_weekday(series.first_weekday());
        build_design(self.design, self.control_days, series.n_days(), &full, self.exclusion)
    }
}

/// One simulated scenario and the model fitted to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub generator: GenConfig,
    pub frames: FrameSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub fit: FitOptions,
    /// Covariate whose curve is scored; defaults to the generator's exposure.
    #[serde(default)]
    pub covariate: Option<String>,
    /// Also build ERL envelopes from the curve draws.
    #[serde(default)]
    pub envelope: bool,
}

impl Scenario {
    pub fn covariate(&self) -> &str {
        self.covariate.as_deref().unwrap_or(&self.generator.exposure_name)
    }
}

/// Simulated dataset `index` (0-based) of a configuration.
pub fn simulate_replication(config: &GenConfig, exposure: &[f64], master_seed: u64, index: usize) -> Result<(DailySeries, Truth)> {
    let mut rng = replication_rng(master_seed, index as u64);
    generate_series(config, exposure, &mut rng)
}

/// Columns of `series` the model reads.
pub fn model_columns(model: &ModelSpec) -> Vec<&str> {
    model
        .fixed_effects
        .iter()
        .map(String::as_str)
        .chain(model.spline_effects.iter().map(|e| e.covariate.as_str()))
        .chain(model.rw2_effects.iter().map(|e| e.covariate.as_str()))
        .collect()
}

/// Scores the fitted curve of `covariate` against the true curve.
pub fn score_fit(fit: &FitResult, truth: &Truth, covariate: &str, envelope: bool) -> Result<ReplicationCurve> {
    let curve = fit
        .curve(covariate)
        .ok_or_else(|| Error::invalid(format!("fit has no curve for {covariate:?}")))?;
    let truth_curve = truth.curve_at(&curve.exposure)?;
    let envelope = if envelope {
        Some(erl_envelope(&curve.draws, fit.level)?)
    } else {
        None
    };
    Ok(ReplicationCurve {
        grid: curve.exposure.clone(),
        n_obs: curve.n_obs.clone(),
        truth: truth_curve,
        median: curve.median.clone(),
        lower: curve.lower.clone(),
        upper: curve.upper.clone(),
        envelope,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicationResult {
    pub index: usize,
    pub curve: ReplicationCurve,
    pub theta: Vec<ThetaSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioOutcome {
    pub name: String,
    pub replications: Vec<ReplicationResult>,
    pub report: CoverageReport,
}

/// Runs replications `0..n` of a scenario in parallel.
pub fn run_scenario(scenario: &Scenario, n_replications: usize, master_seed: u64) -> Result<ScenarioOutcome> {
    if n_replications == 0 {
        return Err(Error::invalid("at least one replication is required"));
    }
    scenario.generator.validate()?;
    let exposure = exposure_series(&scenario.generator)?;
    let columns = model_columns(&scenario.model);
    let covariate = scenario.covariate();
    let replications = (0..n_replications)
        .into_par_iter()
        .map(|index| {
            let (series, truth) = simulate_replication(&scenario.generator, &exposure, master_seed, index)?;
            let frames = scenario.frames.build(&series, &CalendarMask::new(series.n_days()), &columns)?;
            let mut options = scenario.fit.clone();
            options.seed = options.seed.wrapping_add(index as u64);
            let result = fit(&series, &frames, &scenario.model, &options)
                .map_err(|e| Error::invalid(format!("replication {}: {e}", index + 1)))?;
            Ok(ReplicationResult {
                index,
                curve: score_fit(&result, &truth, covariate, scenario.envelope)?,
                theta: result.theta,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let curves: Vec<ReplicationCurve> = replications.iter().map(|r| r.curve.clone()).collect();
    let report = coverage_report(&curves)?;
    Ok(ScenarioOutcome {
        name: scenario.name.clone(),
        replications,
        report,
    })
}
