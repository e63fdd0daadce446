//! Dense reference computations shared by the Laplace tests and the acceptance suite.

use nalgebra::{DMatrix, DVector};
use tumortwin::inverse::{HessianMode, InverseProblem};
use tumortwin::laplace::LowRankPosterior;
use tumortwin::prior::BlockPrior;

/// Matrix of a linear operator, one unit vector at a time.
pub fn columns(n: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        m.set_column(j, &DVector::from_vec(f(&e)));
    }
    m
}

/// Gauss–Newton misfit Hessian and prior precision, symmetrized.
pub struct Dense {
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

pub fn dense(problem: &InverseProblem, theta: &[f64]) -> Dense {
    let lin = problem.linearize(theta).unwrap();
    let n = problem.dim();
    let h = columns(n, |e| problem.misfit_hessian_action(&lin, e, HessianMode::GaussNewton));
    let r = columns(n, |e| problem.prior().apply_r(e));
    Dense { h: 0.5 * (&h + h.transpose()), r: 0.5 * (&r + r.transpose()) }
}

/// Dense generalized eigenvalues via Cholesky of R, descending.
pub fn dense_gevp(d: &Dense) -> Vec<f64> {
    let l = d.r.clone().cholesky().unwrap().l();
    let linv = l.clone().try_inverse().unwrap();
    let c = &linv * &d.h * linv.transpose();
    let mut ev: Vec<f64> = nalgebra::SymmetricEigen::new(0.5 * (&c + c.transpose())).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Largest z-score of the empirical posterior covariance against
/// `covariance_apply`, and the number of entries beyond five standard errors.
pub fn mc_covariance_check(post: &LowRankPosterior, prior: &BlockPrior, n_samples: usize, seed: u64) -> (f64, usize) {
    let n = prior.dim();
    let reference = columns(n, |e| post.covariance_apply(e));
    let mut rng = super::rng(seed);
    let mut cov = DMatrix::<f64>::zeros(n, n);
    let mean = DVector::from_column_slice(post.m_map());
    for _ in 0..n_samples {
        let s = post.transform_fluctuation(&prior.sample_fluctuation(&mut rng));
        let x = DVector::from_vec(s) - &mean;
        cov.ger(1.0, &x, &x, 1.0);
    }
    cov /= n_samples as f64;
    let mut worst = 0.0f64;
    let mut violations = 0;
    for i in 0..n {
        for j in 0..n {
            let se = ((reference[(i, i)] * reference[(j, j)] + reference[(i, j)].powi(2)) / n_samples as f64).sqrt();
            let z = (cov[(i, j)] - reference[(i, j)]).abs() / se;
            worst = worst.max(z);
            if z > 5.0 {
                violations += 1;
            }
        }
    }
    (worst, violations)
}
