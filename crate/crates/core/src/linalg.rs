//! Structured linear algebra for the latent-field Newton solves.
//!
//! The negative Hessian of the log joint has an arrow shape once the daily
//! overdispersion effects are ordered first: a large banded block (days
//! coupled only through shared reference frames), a small dense block (fixed
//! effects and random-walk levels) and a dense coupling between them. It is
//! factorized by a banded Cholesky of the large block followed by a dense
//! Cholesky of the Schur complement.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Symmetric banded matrix stored by its lower band.
#[derive(Debug, Clone, PartialEq)]
pub struct SymBand {
    n: usize,
    bw: usize,
    // data[i * (bw + 1) + d] = A[i, i - d]
    data: Vec<f64>,
}

impl SymBand {
    pub fn zeros(n: usize, bw: usize) -> Self {
        SymBand {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        let d = i - j;
        if d > self.bw {
            0.0
        } else {
            self.data[i * (self.bw + 1) + d]
        }
    }

    /// Adds `v` to entry `(i, j)` (and implicitly `(j, i)`).
    ///
    /// Panics if the entry lies outside the band.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        let d = i - j;
        assert!(d <= self.bw, "entry ({i}, {j}) outside bandwidth {}", self.bw);
        self.data[i * (self.bw + 1) + d] += v;
    }

    pub fn add_diagonal(&mut self, v: f64) {
        for i in 0..self.n {
            self.data[i * (self.bw + 1)] += v;
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        SymBand {
            n: self.n,
            bw: self.bw,
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let row = &self.data[i * (self.bw + 1)..(i + 1) * (self.bw + 1)];
            y[i] += row[0] * x[i];
            for d in 1..=self.bw.min(i) {
                let j = i - d;
                y[i] += row[d] * x[j];
                y[j] += row[d] * x[i];
            }
        }
        y
    }

    /// Quadratic form `x' A x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.mul_vec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// Removes the listed rows and the matching columns.
    pub fn remove_rows_cols(&self, drop: &[usize]) -> SymBand {
        let keep: Vec<usize> = (0..self.n).filter(|i| !drop.contains(i)).collect();
        let mut out = SymBand::zeros(keep.len(), self.bw);
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate().take(a + 1) {
                let v = self.get(i, j);
                if v != 0.0 {
                    out.add(a, b, v);
                }
            }
        }
        out
    }

    pub fn cholesky(&self) -> Option<BandCholesky> {
        let n = self.n;
        let w = self.bw + 1;
        let mut l = vec![0.0; n * w];
        for j in 0..n {
            let jlo = j.saturating_sub(self.bw);
            let mut diag = self.data[j * w];
            for k in jlo..j {
                let v = l[j * w + (j - k)];
                diag -= v * v;
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return None;
            }
            let ljj = diag.sqrt();
            l[j * w] = ljj;
            for i in (j + 1)..n.min(j + w) {
                let ilo = i.saturating_sub(self.bw);
                let mut s = self.data[i * w + (i - j)];
                for k in ilo.max(jlo)..j {
                    s -= l[i * w + (i - k)] * l[j * w + (j - k)];
                }
                l[i * w + (i - j)] = s / ljj;
            }
        }
        Some(BandCholesky {
            n,
            bw: self.bw,
            l,
        })
    }
}

/// Lower Cholesky factor of a [`SymBand`] matrix.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    fn at(&self, i: usize, k: usize) -> f64 {
        self.l[i * (self.bw + 1) + (i - k)]
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.at(i, i).ln()).sum::<f64>()
    }

    /// Solves `L x = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut [f64]) {
        for i in 0..self.n {
            let mut s = b[i];
            for k in i.saturating_sub(self.bw)..i {
                s -= self.at(i, k) * b[k];
            }
            b[i] = s / self.at(i, i);
        }
    }

    /// Solves `L' x = b` in place.
    pub fn solve_upper_in_place(&self, b: &mut [f64]) {
        for i in (0..self.n).rev() {
            let mut s = b[i];
            for k in (i + 1)..self.n.min(i + self.bw + 1) {
                s -= self.at(k, i) * b[k];
            }
            b[i] = s / self.at(i, i);
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_lower_in_place(&mut x);
        self.solve_upper_in_place(&mut x);
        x
    }
}

/// Reverse Cuthill-McKee ordering of a symmetric sparsity pattern.
///
/// Returns `order` with `order[new] = old`. Ties are broken by degree, then
/// by index, so the result is deterministic.
pub fn reverse_cuthill_mckee(adjacency: &[Vec<usize>]) -> Vec<usize> {
    let n = adjacency.len();
    let degree: Vec<usize> = adjacency.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut starts: Vec<usize> = (0..n).collect();
    starts.sort_by_key(|&i| (degree[i], i));
    for &start in &starts {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adjacency[v].iter().copied().filter(|&u| !visited[u]).collect();
            next.sort_by_key(|&u| (degree[u], u));
            next.dedup();
            for u in next {
                visited[u] = true;
                queue.push_back(u);
            }
        }
    }
    order.reverse();
    order
}

/// Bandwidth of a sparsity pattern under the ordering `order[new] = old`.
pub fn bandwidth_under(adjacency: &[Vec<usize>], order: &[usize]) -> usize {
    let mut pos = vec![0; order.len()];
    for (new, &old) in order.iter().enumerate() {
        pos[old] = new;
    }
    adjacency
        .iter()
        .enumerate()
        .flat_map(|(i, nbrs)| nbrs.iter().map(move |&j| (i, j)))
        .map(|(i, j)| pos[i].abs_diff(pos[j]))
        .max()
        .unwrap_or(0)
}

/// Cholesky factorization of the arrow matrix
///
/// ```text
/// P = [ A   G ]
///     [ G'  C ]
/// ```
///
/// with `A` symmetric banded (after a fixed reordering) and `C` small and
/// dense. `P = L L'` with `L = [[L_A, 0], [G~', L_S]]`, `G~ = L_A^{-1} G` and
/// `L_S L_S' = C - G~' G~`.
#[derive(Debug, Clone)]
pub struct ArrowCholesky {
    order: Vec<usize>,
    a: BandCholesky,
    g_tilde: DMatrix<f64>,
    s_lower: DMatrix<f64>,
    log_det: f64,
}

impl ArrowCholesky {
    /// `a` and the rows of `g` must already be in the order given by
    /// `order` (`order[new] = old`). Vectors passed to the solve methods are
    /// in the original order.
    pub fn new(
        order: Vec<usize>,
        a: &SymBand,
        g: &DMatrix<f64>,
        c: &DMatrix<f64>,
    ) -> Result<Self> {
        let n_a = a.n();
        let m = c.nrows();
        if order.len() != n_a || g.nrows() != n_a || g.ncols() != m || c.ncols() != m {
            return Err(Error::invalid("arrow factorization: inconsistent block sizes"));
        }
        let a_chol = a
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("banded block of the latent precision"))?;
        let mut g_tilde = g.clone();
        for mut col in g_tilde.column_iter_mut() {
            a_chol.solve_lower_in_place(col.as_mut_slice());
        }
        let mut schur = c.clone();
        if n_a > 0 && m > 0 {
            schur -= g_tilde.transpose() * &g_tilde;
        }
        // symmetrize against round-off before factorizing
        let schur = (&schur + schur.transpose()) * 0.5;
        let s_lower = if m == 0 {
            DMatrix::zeros(0, 0)
        } else {
            nalgebra::Cholesky::new(schur)
                .ok_or(Error::NotPositiveDefinite("dense block of the latent precision"))?
                .unpack()
        };
        let log_det = a_chol.log_det() + 2.0 * s_lower.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(ArrowCholesky {
            order,
            a: a_chol,
            g_tilde,
            s_lower,
            log_det,
        })
    }

    pub fn n_banded(&self) -> usize {
        self.order.len()
    }

    pub fn n_dense(&self) -> usize {
        self.s_lower.nrows()
    }

    /// `log det P`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    fn permute(&self, x: &[f64]) -> Vec<f64> {
        self.order.iter().map(|&old| x[old]).collect()
    }

    fn unpermute(&self, y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; y.len()];
        for (new, &old) in self.order.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    /// Solves `P x = b` for `b = (b_banded, b_dense)`.
    pub fn solve(&self, b_banded: &[f64], b_dense: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut y_a = self.permute(b_banded);
        self.a.solve_lower_in_place(&mut y_a);
        let mut y_d = DVector::from_column_slice(b_dense);
        if self.n_dense() > 0 {
            if self.n_banded() > 0 {
                y_d -= self.g_tilde.tr_mul(&DVector::from_column_slice(&y_a));
            }
            let y = self
                .s_lower
                .solve_lower_triangular(&y_d)
                .expect("Cholesky factor has a positive diagonal");
            y_d = self
                .s_lower
                .tr_solve_lower_triangular(&y)
                .expect("Cholesky factor has a positive diagonal");
        }
        let x_a = self.back_substitute_banded(y_a, &y_d);
        (self.unpermute(&x_a), y_d.as_slice().to_vec())
    }

    fn back_substitute_banded(&self, mut y_a: Vec<f64>, x_d: &DVector<f64>) -> Vec<f64> {
        if self.n_dense() > 0 && self.n_banded() > 0 {
            let shift = &self.g_tilde * x_d;
            for (v, s) in y_a.iter_mut().zip(shift.iter()) {
                *v -= s;
            }
        }
        self.a.solve_upper_in_place(&mut y_a);
        y_a
    }

    /// Maps standard normal vectors to a draw from `N(0, P^{-1})` by solving
    /// `L' x = eps`.
    pub fn sample(&self, eps_banded: &[f64], eps_dense: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let x_d = self.sample_dense(eps_dense);
        let x_a = self.back_substitute_banded(self.permute(eps_banded), &x_d);
        (self.unpermute(&x_a), x_d.as_slice().to_vec())
    }

    /// Draw of the dense block alone: its marginal is `N(0, S^{-1})`, the
    /// dense block of `P^{-1}`.
    pub fn sample_dense(&self, eps_dense: &[f64]) -> DVector<f64> {
        let eps = DVector::from_column_slice(eps_dense);
        if self.n_dense() == 0 {
            return eps;
        }
        self.s_lower
            .tr_solve_lower_triangular(&eps)
            .expect("Cholesky factor has a positive diagonal")
    }
}

/// Gauss-Hermite rule for the standard normal weight: `sum_i w_i f(x_i)`
/// approximates `E f(Z)`, `Z ~ N(0, 1)`. Nodes are ascending and weights sum
/// to one. Computed by Golub-Welsch.
pub fn gauss_hermite(order: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(order >= 1, "quadrature order must be at least 1");
    let jacobi = DMatrix::from_fn(order, order, |i, j| {
        if i.abs_diff(j) == 1 {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..order)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let mut nodes: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    // exact symmetry about zero
    for i in 0..order / 2 {
        let avg = 0.5 * (nodes[order - 1 - i] - nodes[i]);
        nodes[i] = -avg;
        nodes[order - 1 - i] = avg;
    }
    if order % 2 == 1 {
        nodes[order / 2] = 0.0;
    }
    let mut weights: Vec<f64> = pairs.iter().map(|p| p.1 / total).collect();
    for i in 0..order / 2 {
        let avg = 0.5 * (weights[i] + weights[order - 1 - i]);
        weights[i] = avg;
        weights[order - 1 - i] = avg;
    }
    (nodes, weights)
}
