//! Data misfit, exact discrete adjoint gradient, and Hessian actions.
//!
//! Notation for step `n` of the forward map: `wⁿ` is the implicit-step
//! solution, `uⁿ = sₙwⁿ` the post-radiotherapy state, and
//! `Aₙ = ∂Gₙ/∂w` the (symmetric) step Jacobian. Linearizing in `m`,
//!
//! ```text
//! Aₙ w̃ⁿ = (M/dt) ũⁿ⁻¹ − Pₙ m̃,      Pₙ m̃ = K′[m̃_D] wⁿ − R_m[m̃_κ] wⁿ,
//! ```
//!
//! with `ũ⁰ = 0`. The transpose runs backward in time,
//!
//! ```text
//! Aₙ λⁿ = sₙ (injₙ + (M/dt) λⁿ⁺¹),    λᴺ⁺¹ = 0,    Jᵀy = −Σₙ Pₙᵀ λⁿ,
//! ```
//!
//! where `injₙ` collects `Bᵀy` for the observations at node `n`. Because the
//! stored factors are the forward Jacobians themselves, the adjoint is the
//! exact transpose of the discrete forward map.
//!
//! Every second-order term is a derivative of the scalar
//! `ℒ(w, m) = ⟨λ, K(m)w⟩ − ⟨λ, R(m, w)⟩`, computed cell by cell.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fem::{FemSpace, PointInterpolator, ReactionRule};
use crate::forward::{ForwardSolver, MassTreatment, ObservationSet, StateTrajectory, StepJacobians, TherapySchedule, TimeGrid};
use crate::prior::{gray_indicator, BlockPrior, LayoutKind};

/// Which Hessian to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    GaussNewton,
    Full,
}

/// Linear map from the inversion vector to the nodal fields `(m_D, m_κ)`.
#[derive(Debug, Clone)]
pub struct ParameterLayout {
    kind: LayoutKind,
    n: usize,
    chi: Vec<f64>,
}

impl ParameterLayout {
    pub fn nodal(n_vertices: usize) -> Self {
        ParameterLayout { kind: LayoutKind::Nodal, n: n_vertices, chi: Vec::new() }
    }

    /// Gray/white split with gray-matter indicator `chi`.
    pub fn gray_white(chi: Vec<f64>) -> Self {
        ParameterLayout { kind: LayoutKind::GrayWhite, n: chi.len(), chi }
    }

    pub fn for_space(kind: LayoutKind, space: &FemSpace) -> Self {
        match kind {
            LayoutKind::Nodal => Self::nodal(space.n_vertices()),
            LayoutKind::GrayWhite => Self::gray_white(gray_indicator(space)),
        }
    }

    pub fn kind(&self) -> LayoutKind {
        self.kind
    }

    pub fn n_vertices(&self) -> usize {
        self.n
    }

    pub fn n_blocks(&self) -> usize {
        match self.kind {
            LayoutKind::Nodal => 2,
            LayoutKind::GrayWhite => 3,
        }
    }

    pub fn dim(&self) -> usize {
        self.n_blocks() * self.n
    }

    /// `(m_D, m_κ)` for an inversion vector or direction.
    pub fn split(&self, theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.n;
        match self.kind {
            LayoutKind::Nodal => (theta[..n].to_vec(), theta[n..2 * n].to_vec()),
            LayoutKind::GrayWhite => {
                let md = (0..n).map(|i| self.chi[i] * theta[i] + (1.0 - self.chi[i]) * theta[n + i]).collect();
                (md, theta[2 * n..3 * n].to_vec())
            }
        }
    }

    /// Transpose of [`split`](Self::split).
    pub fn join_transpose(&self, g_d: &[f64], g_k: &[f64]) -> Vec<f64> {
        match self.kind {
            LayoutKind::Nodal => g_d.iter().chain(g_k).copied().collect(),
            LayoutKind::GrayWhite => {
                let mut out = Vec::with_capacity(3 * self.n);
                out.extend(g_d.iter().zip(&self.chi).map(|(g, c)| c * g));
                out.extend(g_d.iter().zip(&self.chi).map(|(g, c)| (1.0 - c) * g));
                out.extend_from_slice(g_k);
                out
            }
        }
    }
}

/// The calibration problem: forward model, data, and prior.
#[derive(Debug)]
pub struct InverseProblem {
    space: Arc<FemSpace>,
    grid: TimeGrid,
    schedule: TherapySchedule,
    treatment: MassTreatment,
    observations: ObservationSet,
    u0: Vec<f64>,
    layout: ParameterLayout,
    prior: BlockPrior,
    interp: PointInterpolator,
    /// Observation indices grouped by grid node.
    obs_by_node: Vec<Vec<usize>>,
}

/// Forward and adjoint state at one parameter point.
#[derive(Debug)]
pub struct Linearization {
    pub theta: Vec<f64>,
    pub trajectory: StateTrajectory,
    pub misfit: f64,
    pub prior_cost: f64,
    /// Misfit gradient in the inversion space.
    pub misfit_gradient: Vec<f64>,
    pub(crate) jacobians: StepJacobians,
    pub(crate) lambda: Vec<Vec<f64>>,
    pub(crate) delta: Vec<f64>,
    pub(crate) rho: Vec<f64>,
}

impl Linearization {
    pub fn cost(&self) -> f64 {
        self.misfit + self.prior_cost
    }

    /// Adjoint multiplier at node `n` (`n ≥ 1`); the terminal value is zero.
    pub fn adjoint(&self, n: usize) -> &[f64] {
        &self.lambda[n]
    }
}

impl InverseProblem {
    pub fn new(
        space: Arc<FemSpace>,
        grid: TimeGrid,
        schedule: TherapySchedule,
        observations: ObservationSet,
        u0: Vec<f64>,
        layout: ParameterLayout,
        prior: BlockPrior,
    ) -> Result<Self> {
        if u0.len() != space.n_vertices() || layout.n_vertices() != space.n_vertices() {
            return Err(Error::invalid("initial condition or layout does not match the mesh"));
        }
        if prior.dim() != layout.dim() || prior.n_blocks() != layout.n_blocks() {
            return Err(Error::invalid(format!(
                "prior has {} blocks of total size {}, layout expects {} blocks of total size {}",
                prior.n_blocks(),
                prior.dim(),
                layout.n_blocks(),
                layout.dim()
            )));
        }
        let mut obs_by_node = vec![Vec::new(); grid.n_steps() + 1];
        if observations.n_times() > 0 {
            observations.validate()?;
            if observations.dim != space.mesh().dim() {
                return Err(Error::invalid("observation points have the wrong dimension"));
            }
            for (i, n) in observations.node_indices(&grid)?.into_iter().enumerate() {
                obs_by_node[n].push(i);
            }
        }
        let interp = space.interpolator(&observations.points)?;
        schedule.validate()?;
        Ok(InverseProblem {
            space,
            grid,
            schedule,
            treatment: MassTreatment::default(),
            observations,
            u0,
            layout,
            prior,
            interp,
            obs_by_node,
        })
    }

    /// Same model and prior with a different data set.
    pub fn with_observations(&self, observations: ObservationSet) -> Result<Self> {
        let problem = InverseProblem::new(
            self.space.clone(),
            self.grid,
            self.schedule.clone(),
            observations,
            self.u0.clone(),
            self.layout.clone(),
            self.prior.clone(),
        )?;
        Ok(problem.with_mass_treatment(self.treatment))
    }

    pub fn with_mass_treatment(mut self, treatment: MassTreatment) -> Self {
        self.treatment = treatment;
        self
    }

    pub fn space(&self) -> &Arc<FemSpace> {
        &self.space
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn schedule(&self) -> &TherapySchedule {
        &self.schedule
    }

    pub fn treatment(&self) -> MassTreatment {
        self.treatment
    }

    pub fn observations(&self) -> &ObservationSet {
        &self.observations
    }

    pub fn u0(&self) -> &[f64] {
        &self.u0
    }

    pub fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    pub fn prior(&self) -> &BlockPrior {
        &self.prior
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn interpolator(&self) -> &PointInterpolator {
        &self.interp
    }

    fn has_data(&self) -> bool {
        self.observations.n_times() > 0 && self.observations.n_points() > 0
    }

    fn solver(&self) -> Result<ForwardSolver<'_>> {
        ForwardSolver::with_mass(&self.space, &self.schedule, self.grid, self.treatment)
    }

    fn check(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::invalid(format!("parameter vector has length {}, expected {}", theta.len(), self.dim())));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        Ok(())
    }

    /// Forward trajectory at `theta`.
    pub fn solve_state(&self, theta: &[f64]) -> Result<StateTrajectory> {
        self.check(theta)?;
        let (md, mk) = self.layout.split(theta);
        self.solver()?.solve(&md, &mk, &self.u0)
    }

    fn residuals(&self, traj: &StateTrajectory) -> Vec<Vec<f64>> {
        let mut res = vec![Vec::new(); self.observations.n_times()];
        for (n, ids) in self.obs_by_node.iter().enumerate() {
            if ids.is_empty() {
                continue;
            }
            let pred = self.interp.apply(traj.state(n));
            for &i in ids {
                res[i] = pred.iter().zip(&self.observations.data[i]).map(|(p, d)| p - d).collect();
            }
        }
        res
    }

    fn misfit_of(&self, residuals: &[Vec<f64>]) -> f64 {
        residuals.iter().flatten().map(|r| r * r).sum::<f64>() / (2.0 * self.observations.noise_variance)
    }

    /// `Φ = Σᵢ ‖Fᵢ(m) − dᵢ‖² / (2σ²)`.
    pub fn misfit_cost(&self, theta: &[f64]) -> Result<f64> {
        self.check(theta)?;
        if !self.has_data() {
            return Ok(0.0);
        }
        Ok(self.misfit_of(&self.residuals(&self.solve_state(theta)?)))
    }

    pub fn prior_cost(&self, theta: &[f64]) -> f64 {
        self.prior.cost(theta)
    }

    /// Negative log-posterior (up to a constant).
    pub fn cost(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.misfit_cost(theta)? + self.prior_cost(theta))
    }

    /// Forward solve with stored Jacobians, adjoint solve, and gradients.
    pub fn linearize(&self, theta: &[f64]) -> Result<Linearization> {
        self.check(theta)?;
        let (md, mk) = self.layout.split(theta);
        let solver = self.solver()?;
        let (trajectory, jacobians) = if self.has_data() {
            solver.solve_with_jacobians(&md, &mk, &self.u0)?
        } else {
            (solver.solve(&md, &mk, &self.u0)?, StepJacobians { factors: Vec::new() })
        };
        let delta = self.space.cell_exp_mean(&md);
        let rho: Vec<f64> = self
            .space
            .cell_exp_mean(&mk)
            .iter()
            .zip(self.space.volumes())
            .map(|(k, v)| k * v / self.space.nloc() as f64)
            .collect();
        let mut lin = Linearization {
            theta: theta.to_vec(),
            trajectory,
            misfit: 0.0,
            prior_cost: self.prior.cost(theta),
            misfit_gradient: vec![0.0; self.dim()],
            jacobians,
            lambda: Vec::new(),
            delta,
            rho,
        };
        if self.has_data() {
            let residuals = self.residuals(&lin.trajectory);
            lin.misfit = self.misfit_of(&residuals);
            let sigma2 = self.observations.noise_variance;
            let weighted: Vec<Vec<f64>> =
                residuals.iter().map(|r| r.iter().map(|x| x / sigma2).collect()).collect();
            lin.lambda = self.adjoint_sweep(&lin, &weighted);
            lin.misfit_gradient = self.params_from_adjoint(&lin, &lin.lambda);
        }
        Ok(lin)
    }

    /// Total gradient and cost at `theta`.
    pub fn gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let lin = self.linearize(theta)?;
        Ok((lin.cost(), self.total_gradient(&lin)))
    }

    pub fn total_gradient(&self, lin: &Linearization) -> Vec<f64> {
        let mut g = self.prior.grad(&lin.theta);
        for (a, b) in g.iter_mut().zip(&lin.misfit_gradient) {
            *a += b;
        }
        g
    }

    fn kernels<'a>(&'a self, lin: &'a Linearization) -> Kernels<'a> {
        Kernels { space: &self.space, rule: self.treatment.reaction_rule(), delta: &lin.delta, rho: &lin.rho }
    }

    fn time_mass_over_dt(&self, v: &[f64]) -> Vec<f64> {
        let dt = self.grid.dt();
        self.solver_mass().matvec(v).into_iter().map(|x| x / dt).collect()
    }

    fn solver_mass(&self) -> crate::sparse::CsrMatrix {
        match self.treatment {
            MassTreatment::Consistent => self.space.mass().clone(),
            MassTreatment::Lumped => self.space.lumped_mass_matrix(),
        }
    }

    fn scales(&self) -> Result<Vec<f64>> {
        Ok(crate::forward::StepPlan::new(&self.schedule, &self.grid)?.rt_scale)
    }

    /// `λⁿ` for observation-space weights `y` (one vector per observation).
    fn adjoint_sweep(&self, lin: &Linearization, y: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n_steps = self.grid.n_steps();
        let s = self.scales().expect("schedule validated at construction");
        let mass = self.solver_mass();
        let dt = self.grid.dt();
        let nv = self.space.n_vertices();
        let mut lambda = vec![Vec::new(); n_steps + 1];
        let mut carry = vec![0.0; nv];
        for n in (1..=n_steps).rev() {
            let mut rhs = carry;
            for &i in &self.obs_by_node[n] {
                self.interp.transpose_scatter_add(1.0, &y[i], &mut rhs);
            }
            rhs.iter_mut().for_each(|v| *v *= s[n]);
            let l = lin.jacobians.factors[n - 1].solve(&rhs);
            carry = mass.matvec(&l).into_iter().map(|x| x / dt).collect();
            lambda[n] = l;
        }
        lambda
    }

    /// `−Σₙ Pₙᵀ λⁿ`, mapped to the inversion space.
    fn params_from_adjoint(&self, lin: &Linearization, lambda: &[Vec<f64>]) -> Vec<f64> {
        let nv = self.space.n_vertices();
        let k = self.kernels(lin);
        let mut gd = vec![0.0; nv];
        let mut gk = vec![0.0; nv];
        for n in 1..=self.grid.n_steps() {
            k.p_transpose(lin.trajectory.pre_event_state(n), &lambda[n], -1.0, &mut gd, &mut gk);
        }
        self.layout.join_transpose(&gd, &gk)
    }

    /// Incremental states `w̃ⁿ` for direction `dir` (inversion space).
    fn incremental_forward(&self, lin: &Linearization, dir: &[f64]) -> Vec<Vec<f64>> {
        let (md, mk) = self.layout.split(dir);
        let k = self.kernels(lin);
        let s = self.scales().expect("schedule validated at construction");
        let cd = k.cell_sums(&md);
        let ck = k.cell_sums(&mk);
        let nv = self.space.n_vertices();
        let mut wt = vec![vec![0.0; nv]; self.grid.n_steps() + 1];
        let mut prev_u = vec![0.0; nv];
        for n in 1..=self.grid.n_steps() {
            let mut rhs = self.time_mass_over_dt(&prev_u);
            k.p_apply_sub(lin.trajectory.pre_event_state(n), &cd, &ck, &mut rhs);
            let w = lin.jacobians.factors[n - 1].solve(&rhs);
            prev_u = w.iter().map(|x| s[n] * x).collect();
            wt[n] = w;
        }
        wt
    }

    /// Linearized parameter-to-observable map `J θ̃`, one column per observation.
    pub fn apply_jacobian(&self, lin: &Linearization, dir: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.require_data(lin)?;
        let wt = self.incremental_forward(lin, dir);
        let s = self.scales()?;
        let mut out = vec![vec![0.0; self.observations.n_points()]; self.observations.n_times()];
        for (n, ids) in self.obs_by_node.iter().enumerate() {
            if n == 0 {
                continue;
            }
            for &i in ids {
                out[i] = self.interp.apply(&wt[n]).into_iter().map(|x| s[n] * x).collect();
            }
        }
        Ok(out)
    }

    /// `Jᵀ y` in the inversion space.
    pub fn apply_jacobian_transpose(&self, lin: &Linearization, y: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.require_data(lin)?;
        if y.len() != self.observations.n_times() || y.iter().any(|c| c.len() != self.observations.n_points()) {
            return Err(Error::invalid("observation-space vector has the wrong shape"));
        }
        let lambda = self.adjoint_sweep(lin, y);
        Ok(self.params_from_adjoint(lin, &lambda))
    }

    fn require_data(&self, lin: &Linearization) -> Result<()> {
        if !self.has_data() || lin.jacobians.factors.len() != self.grid.n_steps() {
            return Err(Error::invalid("no observations: the Jacobian is empty"));
        }
        Ok(())
    }

    /// Misfit Hessian action (no prior term).
    pub fn misfit_hessian_action(&self, lin: &Linearization, dir: &[f64], mode: HessianMode) -> Vec<f64> {
        if !self.has_data() {
            return vec![0.0; self.dim()];
        }
        let nv = self.space.n_vertices();
        let n_steps = self.grid.n_steps();
        let wt = self.incremental_forward(lin, dir);
        let (md, mk) = self.layout.split(dir);
        let k = self.kernels(lin);
        let cd = k.cell_sums(&md);
        let ck = k.cell_sums(&mk);
        let s = self.scales().expect("schedule validated at construction");
        let sigma2 = self.observations.noise_variance;
        let mass = self.solver_mass();
        let dt = self.grid.dt();
        let mut gd = vec![0.0; nv];
        let mut gk = vec![0.0; nv];
        let mut carry = vec![0.0; nv];
        for n in (1..=n_steps).rev() {
            let w = lin.trajectory.pre_event_state(n);
            let mut rhs = carry;
            if !self.obs_by_node[n].is_empty() {
                let bw = self.interp.apply(&wt[n]);
                let weight = s[n] * s[n] * self.obs_by_node[n].len() as f64 / sigma2;
                self.interp.transpose_scatter_add(weight, &bw, &mut rhs);
            }
            if mode == HessianMode::Full {
                let lam = &lin.lambda[n];
                k.g_ww_sub(lam, &wt[n], &mut rhs);
                k.g_wm_sub(w, lam, &cd, &ck, &mut rhs);
                k.g_mw(w, lam, &wt[n], -1.0, &mut gd, &mut gk);
                k.g_mm(w, lam, &cd, &ck, -1.0, &mut gd, &mut gk);
            }
            let lt = lin.jacobians.factors[n - 1].solve(&rhs);
            k.p_transpose(w, &lt, -1.0, &mut gd, &mut gk);
            carry = mass.matvec(&lt).into_iter().map(|x| s[n - 1] * x / dt).collect();
        }
        self.layout.join_transpose(&gd, &gk)
    }

    /// Posterior Hessian action: misfit part plus prior precision.
    pub fn hessian_action(&self, lin: &Linearization, dir: &[f64], mode: HessianMode) -> Vec<f64> {
        let mut h = self.misfit_hessian_action(lin, dir, mode);
        for (a, b) in h.iter_mut().zip(self.prior.apply_r(dir)) {
            *a += b;
        }
        h
    }
}

/// Cell-level derivative kernels of `ℒ(w, m)` at a fixed parameter point.
struct Kernels<'a> {
    space: &'a FemSpace,
    rule: ReactionRule,
    /// `exp(m̄_D)` per cell.
    delta: &'a [f64],
    /// `exp(m̄_κ) vol / (d+1)` per cell.
    rho: &'a [f64],
}

#[inline]
fn q(x: f64) -> f64 {
    x * (1.0 - x)
}

#[inline]
fn dq(x: f64) -> f64 {
    1.0 - 2.0 * x
}

impl Kernels<'_> {
    fn nl(&self) -> f64 {
        self.space.nloc() as f64
    }

    fn cell_sums(&self, v: &[f64]) -> Vec<f64> {
        (0..self.space.n_cells()).map(|c| self.space.cell(c).iter().map(|&i| v[i]).sum()).collect()
    }

    /// `E_c(x, y) = x_cᵀ K0_c y_c`.
    fn energy(&self, c: usize, x: &[f64], y: &[f64]) -> f64 {
        let cell = self.space.cell(c);
        let k0 = self.space.local_stiffness(c);
        let nloc = cell.len();
        let mut e = 0.0;
        for a in 0..nloc {
            let ya: f64 = (0..nloc).map(|b| k0[a * nloc + b] * y[cell[b]]).sum();
            e += x[cell[a]] * ya;
        }
        e
    }

    /// `Q_c(v, w)`: the reaction pairing `⟨v, R(w)⟩` restricted to cell `c`, without `ρ_c`.
    fn pairing(&self, c: usize, v: &[f64], w: &[f64]) -> f64 {
        let cell = self.space.cell(c);
        match self.rule {
            ReactionRule::Centroid => {
                let ub = cell.iter().map(|&i| w[i]).sum::<f64>() / self.nl();
                cell.iter().map(|&i| v[i]).sum::<f64>() * q(ub)
            }
            ReactionRule::Vertex => cell.iter().map(|&i| v[i] * q(w[i])).sum(),
        }
    }

    /// `∂_w Q_c(v, w)[w̃]`.
    fn pairing_dw(&self, c: usize, v: &[f64], w: &[f64], wt: &[f64]) -> f64 {
        let cell = self.space.cell(c);
        match self.rule {
            ReactionRule::Centroid => {
                let nl = self.nl();
                let ub = cell.iter().map(|&i| w[i]).sum::<f64>() / nl;
                let vs: f64 = cell.iter().map(|&i| v[i]).sum();
                let ws: f64 = cell.iter().map(|&i| wt[i]).sum();
                vs * dq(ub) * ws / nl
            }
            ReactionRule::Vertex => cell.iter().map(|&i| v[i] * dq(w[i]) * wt[i]).sum(),
        }
    }

    /// `out −= Pₙ m̃` given cell sums of the direction.
    fn p_apply_sub(&self, w: &[f64], cd: &[f64], ck: &[f64], out: &mut [f64]) {
        let nl = self.nl();
        for c in 0..self.space.n_cells() {
            let cell = self.space.cell(c);
            let k0 = self.space.local_stiffness(c);
            let nloc = cell.len();
            let fd = self.delta[c] * cd[c] / nl;
            let fk = self.rho[c] * ck[c] / nl;
            let ub = cell.iter().map(|&i| w[i]).sum::<f64>() / nl;
            for a in 0..nloc {
                let kw: f64 = (0..nloc).map(|b| k0[a * nloc + b] * w[cell[b]]).sum();
                let react = match self.rule {
                    ReactionRule::Centroid => q(ub),
                    ReactionRule::Vertex => q(w[cell[a]]),
                };
                out[cell[a]] -= fd * kw - fk * react;
            }
        }
    }

    /// `(g_D, g_κ) += α Pₙᵀ v`.
    fn p_transpose(&self, w: &[f64], v: &[f64], alpha: f64, gd: &mut [f64], gk: &mut [f64]) {
        let nl = self.nl();
        for c in 0..self.space.n_cells() {
            let ed = alpha * self.delta[c] / nl * self.energy(c, v, w);
            let ek = -alpha * self.rho[c] / nl * self.pairing(c, v, w);
            for &k in self.space.cell(c) {
                gd[k] += ed;
                gk[k] += ek;
            }
        }
    }

    /// `out −= ∇_w ⟨λ, G_w w̃⟩`.
    fn g_ww_sub(&self, lam: &[f64], wt: &[f64], out: &mut [f64]) {
        let nl = self.nl();
        for c in 0..self.space.n_cells() {
            let cell = self.space.cell(c);
            match self.rule {
                ReactionRule::Centroid => {
                    let ls: f64 = cell.iter().map(|&i| lam[i]).sum();
                    let ws: f64 = cell.iter().map(|&i| wt[i]).sum();
                    let v = 2.0 * self.rho[c] * ls * ws / (nl * nl);
                    for &a in cell {
                        out[a] -= v;
                    }
                }
                ReactionRule::Vertex => {
                    for &a in cell {
                        out[a] -= 2.0 * self.rho[c] * lam[a] * wt[a];
                    }
                }
            }
        }
    }

    /// `out −= ∇_w ⟨λ, G_m m̃⟩`.
    fn g_wm_sub(&self, w: &[f64], lam: &[f64], cd: &[f64], ck: &[f64], out: &mut [f64]) {
        let nl = self.nl();
        for c in 0..self.space.n_cells() {
            let cell = self.space.cell(c);
            let k0 = self.space.local_stiffness(c);
            let nloc = cell.len();
            let fd = self.delta[c] * cd[c] / nl;
            let fk = self.rho[c] * ck[c] / nl;
            let ub = cell.iter().map(|&i| w[i]).sum::<f64>() / nl;
            let ls: f64 = cell.iter().map(|&i| lam[i]).sum();
            for a in 0..nloc {
                let kl: f64 = (0..nloc).map(|b| k0[a * nloc + b] * lam[cell[b]]).sum();
                let dqw = match self.rule {
                    ReactionRule::Centroid => ls * dq(ub) / nl,
                    ReactionRule::Vertex => lam[cell[a]] * dq(w[cell[a]]),
                };
                out[cell[a]] -= fd * kl - fk * dqw;
            }
        }
    }

    /// `(g_D, g_κ) += α ∇_m ⟨λ, G_w w̃⟩`.
    fn g_mw(&self, w: &[f64], lam: &[f64], wt: &[f64], alpha: f64, gd: &mut [f64], gk: &mut [f64]) {
        let nl = self.nl();
        for c in 0..self.space.n_cells() {
            let ed = alpha * self.delta[c] / nl * self.energy(c, lam, wt);
            let ek = -alpha * self.rho[c] / nl * self.pairing_dw(c, lam, w, wt);
            for &k in self.space.cell(c) {
                gd[k] += ed;
                gk[k] += ek;
            }
        }
    }

    /// `(g_D, g_κ) += α ∇_m ⟨λ, G_m m̃⟩`.
    #[allow(clippy::too_many_arguments)]
    fn g_mm(&self, w: &[f64], lam: &[f64], cd: &[f64], ck: &[f64], alpha: f64, gd: &mut [f64], gk: &mut [f64]) {
        let nl2 = self.nl() * self.nl();
        for c in 0..self.space.n_cells() {
            let ed = alpha * self.delta[c] * cd[c] / nl2 * self.energy(c, lam, w);
            let ek = -alpha * self.rho[c] * ck[c] / nl2 * self.pairing(c, lam, w);
            for &k in self.space.cell(c) {
                gd[k] += ed;
                gk[k] += ek;
            }
        }
    }
}
