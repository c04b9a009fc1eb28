//! Map from the latent field `W` to the daily linear predictor, and linear
//! maps from `W` to exposure-response curves on a grid.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::series::DailySeries;
use crate::error::{Error, Result};
use crate::latent::{bin_covariate, Binning, LatentStructure, ModelSpec, Rw2Block};
use crate::simgen::TwoSidedBasis;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignOptions {
    /// Spacing of the summary grid for spline curves, in exposure units.
    #[serde(default = "default_grid_width")]
    pub spline_grid_width: f64,
}

fn default_grid_width() -> f64 {
    1.0
}

impl Default for DesignOptions {
    fn default() -> Self {
        DesignOptions {
            spline_grid_width: default_grid_width(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    Rw2,
    Spline,
}

/// An exposure-response curve evaluated on a grid as a linear function of
/// the dense part `(beta, gamma)` of `W`.
#[derive(Debug, Clone)]
pub struct CurveTerm {
    pub covariate: String,
    pub kind: CurveKind,
    /// Grid on the modelling scale (transformed for RW(2) effects).
    pub grid: Vec<f64>,
    /// Grid on the original covariate scale.
    pub exposure: Vec<f64>,
    /// Retained observations per grid cell.
    pub n_obs: Vec<usize>,
    /// `G x n_dense` map from `(beta, gamma)` to curve values.
    pub weights: DMatrix<f64>,
    /// Reference value on the modelling scale.
    pub reference: f64,
    pub binning: Option<Binning>,
}

impl CurveTerm {
    pub fn evaluate(&self, dense: &[f64]) -> Vec<f64> {
        (0..self.grid.len())
            .map(|g| self.weights.row(g).iter().zip(dense).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Incidence of `W` on days: `eta = X_d (beta, gamma) + Z`.
#[derive(Debug, Clone)]
pub struct Design {
    n_days: usize,
    n_dense: usize,
    rows: Vec<f64>,
    column_names: Vec<String>,
    overdispersion: bool,
    curves: Vec<CurveTerm>,
}

fn used_values(values: &[f64], used: &[bool], name: &str) -> Result<Vec<f64>> {
    values
        .iter()
        .zip(used)
        .enumerate()
        .filter(|(_, (_, u))| **u)
        .map(|(t, (v, _))| {
            if v.is_finite() {
                Ok(*v)
            } else {
                Err(Error::invalid(format!(
                    "column {name:?} is missing on retained day {}",
                    t + 1
                )))
            }
        })
        .collect()
}

impl Design {
    /// Builds the design over the days flagged in `used` (days in at least
    /// one reference frame); other days get zero rows.
    pub fn build(
        series: &DailySeries,
        model: &ModelSpec,
        used: &[bool],
        options: &DesignOptions,
    ) -> Result<(Design, LatentStructure)> {
        model.validate()?;
        let n_days = series.n_days();
        if used.len() != n_days {
            return Err(Error::invalid("day mask length differs from the series length"));
        }
        if !used.iter().any(|&u| u) {
            return Err(Error::invalid("no retained days"));
        }
        if !(options.spline_grid_width > 0.0) {
            return Err(Error::invalid("spline_grid_width must be positive"));
        }
        let spline_basis = TwoSidedBasis::standard();
        let n_spline = spline_basis.n_columns();

        let mut bins = Vec::new();
        for e in &model.rw2_effects {
            let values = used_values(series.covariate(&e.covariate)?, used, &e.covariate)?;
            let b = bin_covariate(&values, e)?;
            if b.n_bins < 4 {
                return Err(Error::invalid(format!(
                    "RW(2) effect on {:?} has {} bins; at least 4 are needed",
                    e.covariate, b.n_bins
                )));
            }
            bins.push(b);
        }
        let n_fixed = model.fixed_effects.len();
        let n_beta = n_fixed + n_spline * model.spline_effects.len() + model.rw2_effects.len();
        let mut blocks = Vec::new();
        let mut offset = 0;
        for b in &bins {
            let block = Rw2Block::new(offset, b.n_bins, b.reference_bin)?;
            offset += block.dim();
            blocks.push(block);
        }
        let n_dense = n_beta + offset;
        let mut rows = vec![0.0; n_days * n_dense];
        let mut names = Vec::with_capacity(n_dense);
        let mut curves = Vec::new();
        let used_days: Vec<usize> = (0..n_days).filter(|&t| used[t]).collect();

        for (j, name) in model.fixed_effects.iter().enumerate() {
            let values = series.covariate(name)?;
            used_values(values, used, name)?;
            for &t in &used_days {
                rows[t * n_dense + j] = values[t];
            }
            names.push(name.clone());
        }

        for (s, effect) in model.spline_effects.iter().enumerate() {
            let start = n_fixed + s * n_spline;
            let values = series.covariate(&effect.covariate)?;
            let observed = used_values(values, used, &effect.covariate)?;
            for &t in &used_days {
                let row = spline_basis.columns(values[t]);
                rows[t * n_dense + start..t * n_dense + start + n_spline].copy_from_slice(&row);
            }
            names.extend((1..=n_spline).map(|k| format!("{}:spline{k}", effect.covariate)));

            let width = options.spline_grid_width;
            let (lo, hi) = (spline_basis.lower(), spline_basis.upper());
            let clamped: Vec<f64> = observed.iter().map(|v| v.clamp(lo, hi)).collect();
            let min = clamped.iter().copied().fold(f64::INFINITY, f64::min);
            let origin = (min / width).floor() * width;
            let cell = |v: f64| ((v - origin) / width).floor() as usize;
            let n_cells = clamped.iter().map(|&v| cell(v)).max().unwrap_or(0) + 1;
            let mut counts = vec![0usize; n_cells];
            for &v in &clamped {
                counts[cell(v)] += 1;
            }
            let cells: Vec<usize> = (0..n_cells).filter(|&c| counts[c] > 0).collect();
            let grid: Vec<f64> = cells
                .iter()
                .map(|&c| (origin + (c as f64 + 0.5) * width).clamp(lo, hi))
                .collect();
            let mut weights = DMatrix::zeros(grid.len(), n_dense);
            for (g, &x) in grid.iter().enumerate() {
                for (k, v) in spline_basis.columns(x).into_iter().enumerate() {
                    weights[(g, start + k)] = v;
                }
            }
            curves.push(CurveTerm {
                covariate: effect.covariate.clone(),
                kind: CurveKind::Spline,
                exposure: grid.clone(),
                grid,
                n_obs: cells.iter().map(|&c| counts[c]).collect(),
                weights,
                reference: spline_basis.reference,
                binning: None,
            });
        }

        let slope_start = n_fixed + n_spline * model.spline_effects.len();
        for (j, (effect, b)) in model.rw2_effects.iter().zip(&bins).enumerate() {
            let slope_col = slope_start + j;
            let gamma_start = n_beta + blocks[j].offset;
            let constraint = &blocks[j].constraint;
            for (&t, (&u, &bin)) in used_days.iter().zip(b.values.iter().zip(&b.index)) {
                rows[t * n_dense + slope_col] = u - effect.reference;
                if let Some(f) = constraint.free_index(bin) {
                    rows[t * n_dense + gamma_start + f] = 1.0;
                }
            }
            let occupied: Vec<usize> = (0..b.n_bins).filter(|&k| b.counts[k] > 0).collect();
            let grid: Vec<f64> = occupied.iter().map(|&k| b.midpoint(k)).collect();
            let mut weights = DMatrix::zeros(grid.len(), n_dense);
            for (g, &k) in occupied.iter().enumerate() {
                weights[(g, slope_col)] = grid[g] - effect.reference;
                if let Some(f) = constraint.free_index(k) {
                    weights[(g, gamma_start + f)] = 1.0;
                }
            }
            curves.push(CurveTerm {
                covariate: effect.covariate.clone(),
                kind: CurveKind::Rw2,
                exposure: grid.iter().map(|&m| effect.transform.inverse(m)).collect(),
                grid,
                n_obs: occupied.iter().map(|&k| b.counts[k]).collect(),
                weights,
                reference: effect.reference,
                binning: Some(b.clone()),
            });
        }
        names.extend(model.rw2_effects.iter().map(|e| format!("{}:slope", e.covariate)));
        for (effect, (b, block)) in model.rw2_effects.iter().zip(bins.iter().zip(&blocks)) {
            for k in 0..b.n_bins {
                if block.constraint.free_index(k).is_some() {
                    names.push(format!("{}:bin{}", effect.covariate, k + 1));
                }
            }
        }
        debug_assert_eq!(names.len(), n_dense);

        let structure = LatentStructure {
            n_beta,
            rw2: blocks,
            n_days,
            overdispersion: model.overdispersion,
        };
        let design = Design {
            n_days,
            n_dense,
            rows,
            column_names: names,
            overdispersion: model.overdispersion,
            curves,
        };
        Ok((design, structure))
    }

    pub fn n_days(&self) -> usize {
        self.n_days
    }

    pub fn n_dense(&self) -> usize {
        self.n_dense
    }

    pub fn overdispersion(&self) -> bool {
        self.overdispersion
    }

    /// `dim(W)`.
    pub fn dim(&self) -> usize {
        self.n_dense + if self.overdispersion { self.n_days } else { 0 }
    }

    /// Dense-part row of 0-based day `t`.
    pub fn row(&self, t: usize) -> &[f64] {
        &self.rows[t * self.n_dense..(t + 1) * self.n_dense]
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn curves(&self) -> &[CurveTerm] {
        &self.curves
    }

    pub fn eta(&self, w: &[f64]) -> Vec<f64> {
        let dense = &w[..self.n_dense];
        (0..self.n_days)
            .map(|t| {
                let base: f64 = self.row(t).iter().zip(dense).map(|(a, b)| a * b).sum();
                if self.overdispersion {
                    base + w[self.n_dense + t]
                } else {
                    base
                }
            })
            .collect()
    }

    /// `J' g` for a gradient `g` in `eta`.
    pub fn pullback(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (t, &gt) in g.iter().enumerate() {
            if gt != 0.0 {
                for (o, a) in out[..self.n_dense].iter_mut().zip(self.row(t)) {
                    *o += a * gt;
                }
            }
        }
        if self.overdispersion {
            out[self.n_dense..].copy_from_slice(g);
        }
        out
    }

    /// Full incidence matrix `J` (`T x dim(W)`), for tests and small problems.
    pub fn incidence_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_days, self.dim(), |t, c| {
            if c < self.n_dense {
                self.rows[t * self.n_dense + c]
            } else if c - self.n_dense == t {
                1.0
            } else {
                0.0
            }
        })
    }
}
