//! Low-rank Laplace approximation of the posterior.
//!
//! The generalized eigenproblem `H v = λ R v` (misfit Gauss–Newton Hessian
//! against prior precision) is solved by a double-pass randomized method.
//! With `Vᵀ R V = I` the posterior covariance is
//!
//! ```text
//! Γ_post = Γ_pr − V diag(λ / (1 + λ)) Vᵀ
//! ```
//!
//! where `Vᵀ` is the plain transpose. This follows from `Γ_pr = V Vᵀ` and
//! `H = R V Λ Vᵀ R` when `V` is complete, and it is what the truncated
//! operator converges to as the rank grows.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inverse::{HessianMode, InverseProblem};
use crate::prior::BlockPrior;
use crate::sparse::dot;

/// Rank and oversampling of the randomized eigensolver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LaplaceOptions {
    pub rank: usize,
    pub oversample: usize,
    pub seed: u64,
}

impl Default for LaplaceOptions {
    fn default() -> Self {
        LaplaceOptions { rank: 50, oversample: 10, seed: 0 }
    }
}

/// Modified Gram–Schmidt in the `R` inner product, applied twice.
/// Columns that collapse below `1e-12` of their original length are dropped.
fn r_orthonormalize(prior: &BlockPrior, cols: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols.len());
    let mut rq: Vec<Vec<f64>> = Vec::with_capacity(cols.len());
    for mut y in cols {
        let initial = dot(&y, &prior.apply_r(&y)).max(0.0).sqrt();
        if initial == 0.0 || !initial.is_finite() {
            continue;
        }
        for _ in 0..2 {
            for (qj, rqj) in q.iter().zip(&rq) {
                let c = dot(rqj, &y);
                for (a, b) in y.iter_mut().zip(qj) {
                    *a -= c * b;
                }
            }
        }
        let ry = prior.apply_r(&y);
        let len = dot(&y, &ry).max(0.0).sqrt();
        if len <= 1e-12 * initial {
            continue;
        }
        y.iter_mut().for_each(|v| *v /= len);
        rq.push(ry.into_iter().map(|v| v / len).collect());
        q.push(y);
    }
    q
}

/// Leading eigenpairs of `H v = λ R v` for a symmetric positive
/// semidefinite operator `hessian`. Returns eigenvalues in descending order
/// (negative Ritz values clamped to zero) and `R`-orthonormal vectors.
pub fn randomized_gevp<H>(hessian: H, prior: &BlockPrior, k: usize, oversample: usize, seed: u64) -> Result<(Vec<f64>, Vec<Vec<f64>>)>
where
    H: Fn(&[f64]) -> Vec<f64> + Sync,
{
    let n = prior.dim();
    if k > n {
        return Err(Error::invalid(format!("requested rank {k} exceeds the parameter dimension {n}")));
    }
    if k == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let r = (k + oversample).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega: Vec<Vec<f64>> = (0..r).map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();

    // first pass: range of Γ_pr H
    let y: Vec<Vec<f64>> = omega.par_iter().map(|w| prior.solve_r(&hessian(w))).collect();
    let q = r_orthonormalize(prior, y);
    if q.is_empty() {
        return Ok((vec![0.0; k], vec![vec![0.0; n]; k]));
    }

    // second pass: Rayleigh–Ritz on span(Q)
    let hq: Vec<Vec<f64>> = q.par_iter().map(|v| hessian(v)).collect();
    let m = q.len();
    let t = DMatrix::from_fn(m, m, |i, j| 0.5 * (dot(&q[i], &hq[j]) + dot(&q[j], &hq[i])));
    let eig = SymmetricEigen::new(t);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    order.truncate(k);

    let mut values = Vec::with_capacity(order.len());
    let mut vectors = Vec::with_capacity(order.len());
    for &j in &order {
        let lambda = eig.eigenvalues[j];
        if lambda < -1e-10 * eig.eigenvalues.amax().max(1.0) {
            log::warn!("clamping Ritz value {lambda:e} to zero");
        }
        values.push(lambda.max(0.0));
        let mut v = vec![0.0; n];
        for (i, qi) in q.iter().enumerate() {
            let s = eig.eigenvectors[(i, j)];
            for (a, b) in v.iter_mut().zip(qi) {
                *a += s * b;
            }
        }
        vectors.push(v);
    }
    Ok((values, vectors))
}

/// Gaussian posterior `N(m_MAP, Γ_post)` with a low-rank update.
#[derive(Debug, Clone)]
pub struct LowRankPosterior {
    m_map: Vec<f64>,
    eigenvalues: Vec<f64>,
    eigenvectors: Vec<Vec<f64>>,
    prior: BlockPrior,
    oversample: usize,
}

impl LowRankPosterior {
    /// Builds the approximation at `m_map` from Gauss–Newton Hessian actions.
    pub fn build(problem: &InverseProblem, m_map: &[f64], opts: &LaplaceOptions) -> Result<Self> {
        let lin = problem.linearize(m_map)?;
        let (eigenvalues, eigenvectors) = randomized_gevp(
            |v| problem.misfit_hessian_action(&lin, v, HessianMode::GaussNewton),
            problem.prior(),
            opts.rank,
            opts.oversample,
            opts.seed,
        )?;
        Ok(LowRankPosterior {
            m_map: m_map.to_vec(),
            eigenvalues,
            eigenvectors,
            prior: problem.prior().clone(),
            oversample: opts.oversample,
        })
    }

    /// Assembles a posterior from precomputed eigenpairs.
    pub fn from_parts(m_map: Vec<f64>, eigenvalues: Vec<f64>, eigenvectors: Vec<Vec<f64>>, prior: BlockPrior) -> Result<Self> {
        if m_map.len() != prior.dim()
            || eigenvalues.len() != eigenvectors.len()
            || eigenvectors.iter().any(|v| v.len() != prior.dim())
        {
            return Err(Error::invalid("eigenpairs do not match the prior dimension"));
        }
        Ok(LowRankPosterior { m_map, eigenvalues, eigenvectors, prior, oversample: 0 })
    }

    pub fn m_map(&self) -> &[f64] {
        &self.m_map
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &[Vec<f64>] {
        &self.eigenvectors
    }

    pub fn prior(&self) -> &BlockPrior {
        &self.prior
    }

    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn oversample(&self) -> usize {
        self.oversample
    }

    /// `Γ_post v`.
    pub fn covariance_apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = self.prior.solve_r(v);
        for (lambda, vj) in self.eigenvalues.iter().zip(&self.eigenvectors) {
            let c = lambda / (1.0 + lambda) * dot(vj, v);
            for (o, x) in out.iter_mut().zip(vj) {
                *o -= c * x;
            }
        }
        out
    }

    /// Diagonal of `Γ_post`, clamped at zero.
    pub fn pointwise_variance(&self) -> Vec<f64> {
        let mut var = self.prior.pointwise_variance();
        for (lambda, vj) in self.eigenvalues.iter().zip(&self.eigenvectors) {
            let c = lambda / (1.0 + lambda);
            for (o, x) in var.iter_mut().zip(vj) {
                *o -= c * x * x;
            }
        }
        var.iter_mut().for_each(|v| *v = v.max(0.0));
        var
    }

    /// Maps a zero-mean prior fluctuation to a posterior sample.
    pub fn transform_fluctuation(&self, n_pr: &[f64]) -> Vec<f64> {
        let rn = self.prior.apply_r(n_pr);
        let mut m: Vec<f64> = self.m_map.iter().zip(n_pr).map(|(a, b)| a + b).collect();
        for (lambda, vj) in self.eigenvalues.iter().zip(&self.eigenvectors) {
            let d = 1.0 - 1.0 / (1.0 + lambda).sqrt();
            let c = d * dot(vj, &rn);
            for (o, x) in m.iter_mut().zip(vj) {
                *o -= c * x;
            }
        }
        m
    }

    pub fn sample_posterior(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.transform_fluctuation(&self.prior.sample_fluctuation(&mut rng))
    }

    pub fn eigenvalues_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.eigenvalues)?)
    }
}
