//! Coverage, bias and width of curve estimates, and extreme rank length
//! (ERL) global envelopes.

mod plot;

use std::cmp::Ordering;
use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use plot::{svg_line_plot, PlotSeries};

/// Minimum number of draws for pointwise intervals.
pub const MIN_INTERVAL_DRAWS: usize = 100;
/// Replication count below which coverage estimates carry a warning.
pub const MIN_REPLICATIONS: usize = 50;
/// Bins with fewer observations are excluded from restricted summaries.
pub const DENSE_BIN_OBS: usize = 20;

/// `S x G` curve draws on a grid, with an optional true curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveDrawSet {
    pub grid: Vec<f64>,
    pub draws: DMatrix<f64>,
    pub truth: Option<Vec<f64>>,
}

impl CurveDrawSet {
    pub fn new(grid: Vec<f64>, draws: DMatrix<f64>, truth: Option<Vec<f64>>) -> Result<Self> {
        if draws.ncols() != grid.len() {
            return Err(Error::invalid(format!(
                "draws have {} columns but the grid has {} points",
                draws.ncols(),
                grid.len()
            )));
        }
        if grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("curve grid must be strictly increasing"));
        }
        if draws.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("curve draws"));
        }
        if let Some(t) = &truth {
            if t.len() != grid.len() {
                return Err(Error::invalid("truth and grid lengths differ"));
            }
        }
        Ok(CurveDrawSet { grid, draws, truth })
    }

    pub fn n_draws(&self) -> usize {
        self.draws.nrows()
    }
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty data");
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Sorted copy of column `j`.
pub(crate) fn sorted_column(draws: &DMatrix<f64>, j: usize) -> Vec<f64> {
    let mut col: Vec<f64> = draws.column(j).iter().copied().collect();
    col.sort_by(f64::total_cmp);
    col
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointwiseInterval {
    pub level: f64,
    pub lower: Vec<f64>,
    pub median: Vec<f64>,
    pub upper: Vec<f64>,
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("level must lie strictly between 0 and 1, got {level}")))
    }
}

/// Empirical quantiles at `(1 - level)/2`, `0.5` and `(1 + level)/2` per
/// column of an `S x G` draw matrix.
pub fn pointwise_interval(draws: &DMatrix<f64>, level: f64) -> Result<PointwiseInterval> {
    check_level(level)?;
    if draws.nrows() < MIN_INTERVAL_DRAWS {
        return Err(Error::invalid(format!(
            "pointwise intervals need at least {MIN_INTERVAL_DRAWS} draws, got {}",
            draws.nrows()
        )));
    }
    let (lo_p, hi_p) = ((1.0 - level) / 2.0, (1.0 + level) / 2.0);
    let mut out = PointwiseInterval {
        level,
        lower: Vec::with_capacity(draws.ncols()),
        median: Vec::with_capacity(draws.ncols()),
        upper: Vec::with_capacity(draws.ncols()),
    };
    for j in 0..draws.ncols() {
        let col = sorted_column(draws, j);
        out.lower.push(quantile_sorted(&col, lo_p));
        out.median.push(quantile_sorted(&col, 0.5));
        out.upper.push(quantile_sorted(&col, hi_p));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalEnvelope {
    pub level: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Ordering used to pick the central draws.
    pub ordering: String,
}

impl GlobalEnvelope {
    pub fn contains(&self, curve: &[f64]) -> bool {
        curve
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (lo, hi))| lo <= v && v <= hi)
    }
}

/// Ascending ranks with ties averaged, `1..=n`.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Draw indices from most to least central under the ERL ordering.
///
/// Each draw's pointwise two-sided ranks `min(r, S + 1 - r)` are sorted
/// ascending; a draw is more central when that vector is lexicographically
/// larger. Ties go to the lower draw index.
pub fn erl_order(draws: &DMatrix<f64>) -> Vec<usize> {
    let (s, g) = draws.shape();
    let mut profiles = vec![Vec::with_capacity(g); s];
    for j in 0..g {
        let col: Vec<f64> = draws.column(j).iter().copied().collect();
        for (i, r) in average_ranks(&col).into_iter().enumerate() {
            profiles[i].push(r.min(s as f64 + 1.0 - r));
        }
    }
    for p in &mut profiles {
        p.sort_by(f64::total_cmp);
    }
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| {
        let lex = profiles[b]
            .iter()
            .zip(&profiles[a])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal);
        lex.then(a.cmp(&b))
    });
    order
}

/// Pointwise hull of the `ceil(level * S)` most central draws.
pub fn erl_envelope(draws: &DMatrix<f64>, level: f64) -> Result<GlobalEnvelope> {
    check_level(level)?;
    let (s, g) = draws.shape();
    if s == 0 || g == 0 {
        return Err(Error::invalid("envelope needs at least one draw and one grid point"));
    }
    if draws.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("curve draws"));
    }
    let keep = ((level * s as f64).ceil() as usize).clamp(1, s);
    let order = erl_order(draws);
    let mut lower = vec![f64::INFINITY; g];
    let mut upper = vec![f64::NEG_INFINITY; g];
    for &i in &order[..keep] {
        for j in 0..g {
            let v = draws[(i, j)];
            lower[j] = lower[j].min(v);
            upper[j] = upper[j].max(v);
        }
    }
    Ok(GlobalEnvelope {
        level,
        lower,
        upper,
        ordering: "erl".to_string(),
    })
}

/// One replication's curve estimate against the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationCurve {
    pub grid: Vec<f64>,
    pub n_obs: Vec<usize>,
    pub truth: Vec<f64>,
    pub median: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub envelope: Option<GlobalEnvelope>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub n_replications: usize,
    pub grid: Vec<f64>,
    pub n_obs: Vec<usize>,
    pub coverage: Vec<f64>,
    pub bias: Vec<f64>,
    pub width: Vec<f64>,
    /// Fraction of replications whose envelope holds the truth everywhere.
    pub joint_coverage: Option<f64>,
    pub warnings: Vec<String>,
}

impl CoverageReport {
    /// Grid indices with at least `min_obs` observations.
    pub fn dense_bins(&self, min_obs: usize) -> Vec<usize> {
        (0..self.grid.len()).filter(|&i| self.n_obs[i] >= min_obs).collect()
    }

    /// Mean of `metric` over bins with at least `min_obs` observations.
    pub fn restricted_mean(&self, metric: &[f64], min_obs: usize) -> Option<f64> {
        let bins = self.dense_bins(min_obs);
        if bins.is_empty() {
            return None;
        }
        Some(bins.iter().map(|&i| metric[i]).sum::<f64>() / bins.len() as f64)
    }

    /// Tidy rows `(grid, metric, value)`.
    pub fn tidy_rows(&self) -> Vec<(f64, &'static str, f64)> {
        let mut rows = Vec::new();
        for i in 0..self.grid.len() {
            let x = self.grid[i];
            rows.push((x, "n_obs", self.n_obs[i] as f64));
            rows.push((x, "coverage", self.coverage[i]));
            rows.push((x, "bias", self.bias[i]));
            rows.push((x, "width", self.width[i]));
        }
        rows
    }
}

/// Pointwise coverage, bias of the median and interval width across
/// replications, plus joint envelope coverage when every replication has an
/// envelope.
pub fn coverage_report(replications: &[ReplicationCurve]) -> Result<CoverageReport> {
    let first = replications
        .first()
        .ok_or_else(|| Error::invalid("coverage needs at least one replication"))?;
    let g = first.grid.len();
    for (r, rep) in replications.iter().enumerate() {
        let lens = [rep.n_obs.len(), rep.truth.len(), rep.median.len(), rep.lower.len(), rep.upper.len()];
        if rep.grid != first.grid || lens.iter().any(|&l| l != g) {
            return Err(Error::invalid(format!("replication {} has a mismatched grid", r + 1)));
        }
        if let Some(e) = &rep.envelope {
            if e.lower.len() != g || e.upper.len() != g {
                return Err(Error::invalid(format!("replication {} has a mismatched envelope", r + 1)));
            }
        }
    }
    let n = replications.len() as f64;
    let mut coverage = vec![0.0; g];
    let mut bias = vec![0.0; g];
    let mut width = vec![0.0; g];
    for rep in replications {
        for j in 0..g {
            if rep.lower[j] <= rep.truth[j] && rep.truth[j] <= rep.upper[j] {
                coverage[j] += 1.0;
            }
            bias[j] += rep.median[j] - rep.truth[j];
            width[j] += rep.upper[j] - rep.lower[j];
        }
    }
    for v in coverage.iter_mut().chain(&mut bias).chain(&mut width) {
        *v /= n;
    }
    let joint_coverage = if replications.iter().all(|r| r.envelope.is_some()) {
        let hits = replications
            .iter()
            .filter(|r| r.envelope.as_ref().is_some_and(|e| e.contains(&r.truth)))
            .count();
        Some(hits as f64 / n)
    } else {
        None
    };
    let mut warnings = Vec::new();
    if replications.len() < MIN_REPLICATIONS {
        let msg = format!(
            "only {} replications; coverage estimates are coarse (at least {MIN_REPLICATIONS} recommended)",
            replications.len()
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(CoverageReport {
        n_replications: replications.len(),
        grid: first.grid.clone(),
        n_obs: first.n_obs.clone(),
        coverage,
        bias,
        width,
        joint_coverage,
        warnings,
    })
}

/// Writes tidy `grid,metric,value,scenario` rows for several reports.
pub fn write_tidy_csv<W: Write>(out: W, reports: &[(&str, &CoverageReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["grid", "metric", "value", "scenario"])?;
    for (scenario, report) in reports {
        for (x, metric, v) in report.tidy_rows() {
            w.write_record([x.to_string(), metric.to_string(), v.to_string(), scenario.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
