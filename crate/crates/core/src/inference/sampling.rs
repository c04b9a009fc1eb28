//! Exact draws from the Gaussian mixture approximation of `pi(W | Y)`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::aghq::HyperPosterior;
use super::newton::InnerModeResult;
use crate::error::{Error, Result};

/// Which part of `W` to draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawScope {
    /// All of `W`.
    Full,
    /// Only `(beta, gamma)`, drawn from their exact marginal.
    Dense,
}

/// `S` draws of `W` (rows), with the quadrature node each came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub values: DMatrix<f64>,
    pub node: Vec<usize>,
    pub scope: DrawScope,
}

impl PosteriorDraws {
    pub fn n_draws(&self) -> usize {
        self.values.nrows()
    }

    /// The first `n` columns (the dense part when `n = n_dense`).
    pub fn leading_columns(&self, n: usize) -> DMatrix<f64> {
        self.values.columns(0, n).into_owned()
    }
}

fn pick_node(masses: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, m) in masses.iter().enumerate() {
        acc += m;
        if u < acc {
            return i;
        }
    }
    masses.iter().rposition(|&m| m > 0.0).unwrap_or(0)
}

/// Draws node `k` with probability equal to its mass, then
/// `W ~ N(W_hat_k, H_k^{-1})` through the node's Cholesky factor. Draw `s`
/// uses its own random stream, so results do not depend on thread count.
pub fn sample_latent(
    hp: &HyperPosterior,
    modes: &[InnerModeResult],
    n_draws: usize,
    seed: u64,
    scope: DrawScope,
) -> Result<PosteriorDraws> {
    if n_draws == 0 {
        return Err(Error::invalid("at least one draw is required"));
    }
    if modes.len() != hp.nodes.len() {
        return Err(Error::invalid("one inner mode per quadrature node is required"));
    }
    let masses = hp.masses();
    let n_dense = modes[0].factor.n_dense();
    let n_banded = modes[0].factor.n_banded();
    let width = match scope {
        DrawScope::Full => n_dense + n_banded,
        DrawScope::Dense => n_dense,
    };
    let rows: Vec<(usize, Vec<f64>)> = (0..n_draws)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            let k = pick_node(&masses, rng.random::<f64>());
            let mode = &modes[k];
            let eps_d: Vec<f64> = (0..n_dense).map(|_| rng.sample(StandardNormal)).collect();
            let mut w = Vec::with_capacity(width);
            match scope {
                DrawScope::Dense => {
                    let x = mode.factor.sample_dense(&eps_d);
                    w.extend(x.iter().zip(&mode.w_hat).map(|(a, b)| a + b));
                }
                DrawScope::Full => {
                    let eps_b: Vec<f64> = (0..n_banded).map(|_| rng.sample(StandardNormal)).collect();
                    let (xb, xd) = mode.factor.sample(&eps_b, &eps_d);
                    w.extend(xd.iter().chain(&xb).zip(&mode.w_hat).map(|(a, b)| a + b));
                }
            }
            (k, w)
        })
        .collect();
    let values = DMatrix::from_fn(n_draws, width, |i, j| rows[i].1[j]);
    Ok(PosteriorDraws {
        values,
        node: rows.iter().map(|r| r.0).collect(),
        scope,
    })
}
