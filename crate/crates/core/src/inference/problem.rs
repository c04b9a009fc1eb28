//! The log joint `log pi(W, theta, Y)` in `W`, with its gradient and the
//! arrow-structured negative Hessian.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::latent::{LatentStructure, PriorSpec};
use crate::likelihood::{Design, EtaDerivatives, EtaLikelihood};
use crate::linalg::{bandwidth_under, reverse_cuthill_mckee, ArrowCholesky, SymBand};

/// A likelihood, design and latent prior bound together.
///
/// The daily effects `Z` form the banded block of the precision (reordered
/// once by reverse Cuthill-McKee over the likelihood's coupling pattern) and
/// `(beta, gamma)` the dense block.
pub struct Problem {
    likelihood: Box<dyn EtaLikelihood>,
    design: Design,
    structure: LatentStructure,
    priors: PriorSpec,
    z_order: Vec<usize>,
    z_pos: Vec<usize>,
    z_bandwidth: usize,
}

impl Problem {
    pub fn new(
        likelihood: Box<dyn EtaLikelihood>,
        design: Design,
        structure: LatentStructure,
        priors: PriorSpec,
    ) -> Result<Self> {
        if likelihood.n_days() != design.n_days() || design.dim() != structure.dim() {
            return Err(Error::invalid("likelihood, design and latent structure disagree on dimensions"));
        }
        priors.validate(structure.rw2.len())?;
        let (z_order, z_bandwidth) = if structure.overdispersion {
            let n = design.n_days();
            let mut adjacency = vec![Vec::new(); n];
            for group in likelihood.coupling() {
                for &i in &group {
                    for &j in &group {
                        if i != j {
                            adjacency[i].push(j);
                        }
                    }
                }
            }
            for nbrs in &mut adjacency {
                nbrs.sort_unstable();
                nbrs.dedup();
            }
            let order = reverse_cuthill_mckee(&adjacency);
            let bw = bandwidth_under(&adjacency, &order);
            (order, bw)
        } else {
            (Vec::new(), 0)
        };
        let mut z_pos = vec![0; z_order.len()];
        for (new, &old) in z_order.iter().enumerate() {
            z_pos[old] = new;
        }
        Ok(Problem {
            likelihood,
            design,
            structure,
            priors,
            z_order,
            z_pos,
            z_bandwidth,
        })
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    pub fn structure(&self) -> &LatentStructure {
        &self.structure
    }

    pub fn priors(&self) -> &PriorSpec {
        &self.priors
    }

    pub fn likelihood(&self) -> &dyn EtaLikelihood {
        self.likelihood.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.structure.dim()
    }

    pub fn n_theta(&self) -> usize {
        self.structure.n_theta()
    }

    /// Bandwidth of the reordered `Z` block.
    pub fn z_bandwidth(&self) -> usize {
        self.z_bandwidth
    }

    pub fn log_lik(&self, w: &[f64]) -> Result<f64> {
        self.likelihood.log_lik(&self.design.eta(w))
    }

    /// `log pi(Y | W) + log pi(W | theta)`.
    pub fn log_joint(&self, w: &[f64], theta: &[f64]) -> Result<f64> {
        let v = self.log_lik(w)? + self.structure.log_density(w, theta, &self.priors)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("log joint"))
        }
    }

    pub fn gradient(&self, w: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        let d = self.likelihood.derivatives(&self.design.eta(w))?;
        Ok(self.gradient_from(&d, w, theta))
    }

    fn gradient_from(&self, d: &EtaDerivatives, w: &[f64], theta: &[f64]) -> Vec<f64> {
        let mut g = self.design.pullback(&d.gradient);
        for (gi, pi) in g.iter_mut().zip(self.structure.log_density_gradient(w, theta, &self.priors)) {
            *gi += pi;
        }
        g
    }

    /// Gradient and Cholesky factor of the negative Hessian at `w`.
    pub fn gradient_and_factor(&self, w: &[f64], theta: &[f64]) -> Result<(Vec<f64>, ArrowCholesky)> {
        let d = self.likelihood.derivatives(&self.design.eta(w))?;
        let g = self.gradient_from(&d, w, theta);
        Ok((g, self.factor_from(&d, theta)?))
    }

    fn factor_from(&self, d: &EtaDerivatives, theta: &[f64]) -> Result<ArrowCholesky> {
        let design = &self.design;
        let m = design.n_dense();
        let n = design.n_days();
        let mut c = self.structure.dense_precision(theta, &self.priors);

        // J_d' diag(curvature) J_d, lower triangle.
        for t in 0..n {
            let ct = d.curvature_diag[t];
            if ct == 0.0 {
                continue;
            }
            let row = design.row(t);
            for i in 0..m {
                let ai = row[i] * ct;
                if ai == 0.0 {
                    continue;
                }
                for j in 0..=i {
                    c[(i, j)] += ai * row[j];
                }
            }
        }
        let mut projections = Vec::with_capacity(d.rank_one.len());
        for term in &d.rank_one {
            let mut v = vec![0.0; m];
            for (&t, &p) in term.members.iter().zip(&term.probs) {
                for (vi, a) in v.iter_mut().zip(design.row(t)) {
                    *vi += p * a;
                }
            }
            for i in 0..m {
                let wi = term.weight * v[i];
                for j in 0..=i {
                    c[(i, j)] -= wi * v[j];
                }
            }
            projections.push(v);
        }
        for i in 0..m {
            for j in 0..i {
                c[(j, i)] = c[(i, j)];
            }
        }

        if !self.structure.overdispersion {
            return ArrowCholesky::new(Vec::new(), &SymBand::zeros(0, 0), &DMatrix::zeros(0, m), &c);
        }

        let tau0 = self.structure.z_precision(theta);
        let mut band = SymBand::zeros(n, self.z_bandwidth);
        let mut g = DMatrix::zeros(n, m);
        for t in 0..n {
            let pt = self.z_pos[t];
            band.add(pt, pt, d.curvature_diag[t] + tau0);
            let ct = d.curvature_diag[t];
            if ct != 0.0 {
                for (j, a) in design.row(t).iter().enumerate() {
                    g[(pt, j)] += ct * a;
                }
            }
        }
        for (term, v) in d.rank_one.iter().zip(&projections) {
            for (a, (&i, &pi)) in term.members.iter().zip(&term.probs).enumerate() {
                let wp = term.weight * pi;
                let ri = self.z_pos[i];
                for j in 0..m {
                    g[(ri, j)] -= wp * v[j];
                }
                for (&k, &pk) in term.members[..=a].iter().zip(&term.probs[..=a]) {
                    let rk = self.z_pos[k];
                    let (hi, lo) = if ri >= rk { (ri, rk) } else { (rk, ri) };
                    band.add(hi, lo, -wp * pk);
                }
            }
        }
        ArrowCholesky::new(self.z_order.clone(), &band, &g, &c)
    }

    /// Dense negative Hessian of the log joint, for checks on small problems.
    pub fn neg_hessian_dense(&self, w: &[f64], theta: &[f64]) -> Result<DMatrix<f64>> {
        let d = self.likelihood.derivatives(&self.design.eta(w))?;
        let j = self.design.incidence_dense();
        let mut p = j.transpose() * (-d.hessian_dense()) * &j;
        let m = self.design.n_dense();
        let prior = self.structure.dense_precision(theta, &self.priors);
        for a in 0..m {
            for b in 0..m {
                p[(a, b)] += prior[(a, b)];
            }
        }
        let tau0 = self.structure.z_precision(theta);
        for t in self.structure.z_range() {
            p[(t, t)] += tau0;
        }
        Ok(p)
    }

    /// Splits a full-length vector into its `(Z, dense)` blocks.
    pub(crate) fn split<'a>(&self, x: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        let m = self.design.n_dense();
        (&x[m..], &x[..m])
    }

    pub(crate) fn join(&self, z: &[f64], dense: &[f64]) -> Vec<f64> {
        dense.iter().chain(z).copied().collect()
    }
}
