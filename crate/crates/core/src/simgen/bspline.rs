//! B-spline bases and the two-sided exposure-response curve pinned at a
//! reference exposure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// B-spline basis of a given degree over a nondecreasing knot vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    knots: Vec<f64>,
    degree: usize,
}

impl BSplineBasis {
    pub fn new(knots: Vec<f64>, degree: usize) -> Result<Self> {
        if knots.len() < 2 * (degree + 1) {
            return Err(Error::invalid(format!(
                "{} knots cannot support a degree-{degree} basis",
                knots.len()
            )));
        }
        if knots.iter().any(|k| !k.is_finite()) || knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("knots must be finite and nondecreasing"));
        }
        let basis = BSplineBasis { knots, degree };
        if basis.upper() <= basis.lower() {
            return Err(Error::invalid("knot vector has an empty domain"));
        }
        Ok(basis)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_basis(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn lower(&self) -> f64 {
        self.knots[self.degree]
    }

    pub fn upper(&self) -> f64 {
        self.knots[self.n_basis()]
    }

    /// Greville abscissae (knot averages) of the basis functions.
    pub fn greville(&self) -> Vec<f64> {
        let p = self.degree.max(1);
        (0..self.n_basis())
            .map(|i| self.knots[i + 1..=i + p].iter().sum::<f64>() / p as f64)
            .collect()
    }

    fn span(&self, x: f64) -> usize {
        let last = self.n_basis() - 1;
        if x >= self.upper() {
            // right end belongs to the last nonempty interval
            return (self.degree..=last)
                .rev()
                .find(|&i| self.knots[i] < self.knots[i + 1])
                .unwrap_or(last);
        }
        let (mut lo, mut hi) = (self.degree, last + 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if x < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Values of all basis functions at `x`, clamped to the domain.
    pub fn eval(&self, x: f64) -> Vec<f64> {
        let x = x.clamp(self.lower(), self.upper());
        let p = self.degree;
        let i = self.span(x);
        let t = &self.knots;
        // Triangular Cox-de Boor scheme for the p+1 nonzero functions.
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = x - t[i + 1 - j];
            right[j] = t[i + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom > 0.0 { n[r] / denom } else { 0.0 };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        let mut out = vec![0.0; self.n_basis()];
        out[i - p..=i].copy_from_slice(&n);
        out
    }
}

/// Two clamped cubic bases meeting at a reference value, with the two
/// functions that are nonzero at the reference removed so that every
/// expansion vanishes there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoSidedBasis {
    pub reference: f64,
    pub left: BSplineBasis,
    pub right: BSplineBasis,
}

fn clamped(lower: f64, interior: &[f64], upper: f64, degree: usize) -> Vec<f64> {
    let mut knots = vec![lower; degree + 1];
    knots.extend_from_slice(interior);
    knots.extend(std::iter::repeat_n(upper, degree + 1));
    knots
}

impl TwoSidedBasis {
    /// Ten cubic functions per side over `[-0.2, 20]` and `[20, 102]`,
    /// with denser knots at low exposures.
    pub fn standard() -> Self {
        let left = BSplineBasis::new(clamped(-0.2, &[2.0, 4.0, 6.0, 8.0, 10.0, 15.0], 20.0, 3), 3)
            .expect("valid left knots");
        let right = BSplineBasis::new(clamped(20.0, &[25.0, 30.0, 40.0, 50.0, 70.0, 85.0], 102.0, 3), 3)
            .expect("valid right knots");
        TwoSidedBasis {
            reference: 20.0,
            left,
            right,
        }
    }

    pub fn new(reference: f64, left: BSplineBasis, right: BSplineBasis) -> Result<Self> {
        if left.upper() != reference || right.lower() != reference {
            return Err(Error::invalid("both bases must meet at the reference value"));
        }
        Ok(TwoSidedBasis { reference, left, right })
    }

    pub fn lower(&self) -> f64 {
        self.left.lower()
    }

    pub fn upper(&self) -> f64 {
        self.right.upper()
    }

    /// Number of free columns: all functions except the last on the left
    /// and the first on the right.
    pub fn n_columns(&self) -> usize {
        self.left.n_basis() + self.right.n_basis() - 2
    }

    /// Design row at `x` (clamped to the domain).
    pub fn columns(&self, x: f64) -> Vec<f64> {
        let nl = self.left.n_basis() - 1;
        let mut row = vec![0.0; self.n_columns()];
        if x < self.reference {
            let v = self.left.eval(x);
            row[..nl].copy_from_slice(&v[..nl]);
        } else if x > self.reference {
            let v = self.right.eval(x);
            row[nl..].copy_from_slice(&v[1..]);
        }
        row
    }
}

/// The true exposure-response curve used for simulation: a two-sided cubic
/// B-spline expansion, zero at the reference, times a global multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExposureCurveSpec {
    pub reference: f64,
    pub degree: usize,
    pub left_knots: Vec<f64>,
    pub right_knots: Vec<f64>,
    pub left_coefficients: Vec<f64>,
    pub right_coefficients: Vec<f64>,
    pub multiplier: f64,
}

/// Shape of the stand-in curve before the multiplier:
/// `0.0889 ln((u + 26.5) / 46.5)`, monotone and concave with value 0 at 20.
fn stand_in_shape(u: f64) -> f64 {
    0.0889 * ((u + 26.5) / 46.5).ln()
}

impl ExposureCurveSpec {
    /// Stand-in curve on the standard knots: coefficients are the shape
    /// function at the Greville abscissae, giving roughly -0.5 at 0 and
    /// +0.9 at 102 after the multiplier of 10.
    pub fn standard() -> Self {
        let basis = TwoSidedBasis::standard();
        let coef = |b: &BSplineBasis| b.greville().into_iter().map(stand_in_shape).collect::<Vec<_>>();
        let mut left_coefficients = coef(&basis.left);
        let mut right_coefficients = coef(&basis.right);
        // Greville abscissae at the reference are exactly 20; pin anyway.
        *left_coefficients.last_mut().expect("nonempty") = 0.0;
        right_coefficients[0] = 0.0;
        ExposureCurveSpec {
            reference: basis.reference,
            degree: 3,
            left_knots: basis.left.knots().to_vec(),
            right_knots: basis.right.knots().to_vec(),
            left_coefficients,
            right_coefficients,
            multiplier: 10.0,
        }
    }

    pub fn basis(&self) -> Result<TwoSidedBasis> {
        TwoSidedBasis::new(
            self.reference,
            BSplineBasis::new(self.left_knots.clone(), self.degree)?,
            BSplineBasis::new(self.right_knots.clone(), self.degree)?,
        )
    }

    /// Coefficients of the expansion in the columns of [`TwoSidedBasis::columns`],
    /// multiplier included.
    pub fn column_coefficients(&self) -> Vec<f64> {
        let nl = self.left_coefficients.len() - 1;
        self.left_coefficients[..nl]
            .iter()
            .chain(&self.right_coefficients[1..])
            .map(|c| c * self.multiplier)
            .collect()
    }

    fn validate(&self, basis: &TwoSidedBasis) -> Result<()> {
        if self.left_coefficients.is_empty() || self.right_coefficients.is_empty() {
            return Err(Error::invalid("exposure curve coefficients are not set"));
        }
        if self.left_coefficients.len() != basis.left.n_basis()
            || self.right_coefficients.len() != basis.right.n_basis()
        {
            return Err(Error::invalid("coefficient counts do not match the knot vectors"));
        }
        if self.left_coefficients.last() != Some(&0.0) || self.right_coefficients[0] != 0.0 {
            return Err(Error::invalid(
                "coefficients of the functions touching the reference must be zero",
            ));
        }
        if !self.multiplier.is_finite()
            || self.left_coefficients.iter().chain(&self.right_coefficients).any(|c| !c.is_finite())
        {
            return Err(Error::NonFinite("exposure curve coefficients"));
        }
        Ok(())
    }
}

/// Evaluates the curve at each exposure (clamped to the knot domain).
pub fn eval_exposure_curve(pm: &[f64], spec: &ExposureCurveSpec) -> Result<Vec<f64>> {
    let basis = spec.basis()?;
    spec.validate(&basis)?;
    let coef = spec.column_coefficients();
    pm.iter()
        .map(|&x| {
            if x.is_nan() {
                return Err(Error::NonFinite("exposure"));
            }
            Ok(basis.columns(x).iter().zip(&coef).map(|(b, c)| b * c).sum())
        })
        .collect()
}
