//! Inexact Newton-CG for the maximum a posteriori point.
//!
//! Each outer iteration solves `H d = -g` with conjugate gradients
//! preconditioned by the prior covariance, stopping early by the
//! Eisenstat–Walker forcing term or on negative curvature (Steihaug), then
//! globalizes with Armijo backtracking. The first `gn_iterations` steps use
//! the Gauss–Newton Hessian.
//!
//! Gradient norms are measured in the prior-covariance inner product,
//! `‖g‖ = √⟨g, Γ_pr g⟩`, so tolerances mean the same thing on every mesh.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inverse::{HessianMode, InverseProblem, Linearization};
use crate::sparse::dot;

/// Tuning knobs for [`compute_map`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonOptions {
    pub max_newton: usize,
    pub grad_rtol: f64,
    pub grad_atol: f64,
    pub max_cg: usize,
    pub armijo_c: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    /// Number of leading iterations that use the Gauss–Newton Hessian.
    pub gn_iterations: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            max_newton: 50,
            grad_rtol: 1e-6,
            grad_atol: 1e-9,
            max_cg: 200,
            armijo_c: 1e-4,
            backtrack_factor: 0.5,
            max_backtracks: 20,
            gn_iterations: 5,
        }
    }
}

impl NewtonOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.grad_rtol, self.grad_atol, self.armijo_c, self.backtrack_factor];
        if positive.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::invalid("Newton tolerances and factors must be positive"));
        }
        if self.armijo_c >= 1.0 || self.backtrack_factor >= 1.0 {
            return Err(Error::invalid("armijo_c and backtrack_factor must lie in (0, 1)"));
        }
        if self.max_newton == 0 || self.max_cg == 0 || self.max_backtracks == 0 {
            return Err(Error::invalid("iteration limits must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    MaxIterations,
    LineSearchFailure,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::GradientTolerance => "gradient tolerance reached",
            StopReason::MaxIterations => "maximum Newton iterations reached",
            StopReason::LineSearchFailure => "line search failed to find sufficient decrease",
        })
    }
}

/// One row of the iteration log. Row 0 describes the initial guess.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub cost: f64,
    pub misfit: f64,
    pub reg: f64,
    pub gradnorm: f64,
    pub cg_iters: usize,
    pub step_length: f64,
}

#[derive(Debug, Clone)]
pub struct MapResult {
    pub m_map: Vec<f64>,
    pub grad_norm: f64,
    pub initial_grad_norm: f64,
    pub iterations: usize,
    pub total_cg_iterations: usize,
    pub converged: bool,
    pub reason: StopReason,
    pub history: Vec<IterationRecord>,
}

impl MapResult {
    pub fn cost_history(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.cost).collect()
    }

    /// CG iterations per Newton step, skipping the initial row.
    pub fn cg_per_newton(&self) -> Vec<usize> {
        self.history.iter().skip(1).map(|r| r.cg_iters).collect()
    }

    pub fn write_log_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "iter,cost,misfit,reg,gradnorm,cg_iters,step_length")?;
        for r in &self.history {
            writeln!(
                out,
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{},{:.17e}",
                r.iter, r.cost, r.misfit, r.reg, r.gradnorm, r.cg_iters, r.step_length
            )?;
        }
        Ok(())
    }
}

struct CgOutcome {
    step: Vec<f64>,
    iterations: usize,
}

/// Preconditioned CG on `H d = -g` with Steihaug truncation.
fn steihaug_cg(
    problem: &InverseProblem,
    lin: &Linearization,
    g: &[f64],
    mode: HessianMode,
    eta: f64,
    max_cg: usize,
) -> CgOutcome {
    let n = g.len();
    let mut x = vec![0.0; n];
    let mut r: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut z = problem.prior().solve_r(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let tol = eta * rz.max(0.0).sqrt();
    for it in 0..max_cg {
        let hp = problem.hessian_action(lin, &p, mode);
        let curvature = dot(&p, &hp);
        if curvature <= 0.0 || !curvature.is_finite() {
            if it == 0 {
                // preconditioned steepest descent
                return CgOutcome { step: p, iterations: 1 };
            }
            return CgOutcome { step: x, iterations: it };
        }
        let alpha = rz / curvature;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * hp[i];
        }
        z = problem.prior().solve_r(&r);
        let rz_new = dot(&r, &z);
        if rz_new.max(0.0).sqrt() <= tol {
            return CgOutcome { step: x, iterations: it + 1 };
        }
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    CgOutcome { step: x, iterations: max_cg }
}

fn prior_norm(problem: &InverseProblem, g: &[f64]) -> f64 {
    dot(g, &problem.prior().solve_r(g)).max(0.0).sqrt()
}

/// Minimizes the negative log-posterior starting from `m0`.
///
/// Forward-solver failures at the initial guess are returned as errors.
/// Trial points of the line search whose forward solve fails are treated as
/// rejected and the step is shortened.
pub fn compute_map(problem: &InverseProblem, m0: &[f64], opts: &NewtonOptions) -> Result<MapResult> {
    opts.validate()?;
    if m0.len() != problem.dim() {
        return Err(Error::invalid(format!("initial guess has length {}, expected {}", m0.len(), problem.dim())));
    }
    if m0.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("initial guess".into()));
    }
    let mut lin = problem.linearize(m0)?;
    let mut g = problem.total_gradient(&lin);
    let mut gnorm = prior_norm(problem, &g);
    let g0 = gnorm;
    let tol = (opts.grad_rtol * g0).max(opts.grad_atol);
    let mut history = vec![IterationRecord {
        iter: 0,
        cost: lin.cost(),
        misfit: lin.misfit,
        reg: lin.prior_cost,
        gradnorm: gnorm,
        cg_iters: 0,
        step_length: 0.0,
    }];
    let mut total_cg = 0;
    let mut reason = StopReason::MaxIterations;

    for k in 0..opts.max_newton {
        if gnorm <= tol {
            reason = StopReason::GradientTolerance;
            break;
        }
        let mode = if k < opts.gn_iterations { HessianMode::GaussNewton } else { HessianMode::Full };
        let eta = (gnorm / g0).sqrt().min(0.5);
        let cg = steihaug_cg(problem, &lin, &g, mode, eta, opts.max_cg);
        total_cg += cg.iterations;
        let mut d = cg.step;
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            d = problem.prior().solve_r(&g).iter().map(|x| -x).collect();
            slope = dot(&g, &d);
        }

        let cost = lin.cost();
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let trial: Vec<f64> = lin.theta.iter().zip(&d).map(|(m, s)| m + step * s).collect();
            match problem.cost(&trial) {
                Ok(c) if c.is_finite() && c <= cost + opts.armijo_c * step * slope => {
                    accepted = Some(trial);
                    break;
                }
                Ok(_) => {}
                Err(e) if e.is_solver_failure() => {}
                Err(e) => return Err(e),
            }
            step *= opts.backtrack_factor;
        }
        let Some(next) = accepted else {
            reason = StopReason::LineSearchFailure;
            break;
        };
        lin = problem.linearize(&next)?;
        g = problem.total_gradient(&lin);
        gnorm = prior_norm(problem, &g);
        history.push(IterationRecord {
            iter: k + 1,
            cost: lin.cost(),
            misfit: lin.misfit,
            reg: lin.prior_cost,
            gradnorm: gnorm,
            cg_iters: cg.iterations,
            step_length: step,
        });
        log::debug!("newton {}: cost {:.6e} |g| {:.3e} cg {} step {}", k + 1, lin.cost(), gnorm, cg.iterations, step);
    }
    if reason == StopReason::MaxIterations && gnorm <= tol {
        reason = StopReason::GradientTolerance;
    }
    Ok(MapResult {
        m_map: lin.theta,
        grad_norm: gnorm,
        initial_grad_norm: g0,
        iterations: history.len() - 1,
        total_cg_iterations: total_cg,
        converged: reason == StopReason::GradientTolerance,
        reason,
        history,
    })
}
