//! Time integration of the treated reaction–diffusion model.
//!
//! Each step solves the implicit-Euler system
//!
//! ```text
//! M(w − uⁿ⁻¹)/dt + K(m_D) w − R(m_κ, w) + cₙ M w = 0
//! ```
//!
//! by Newton's method, then applies any radiotherapy fraction scheduled at
//! the new node as a nodal multiplication `uⁿ = sₙ w`. The chemotherapy rate
//! `cₙ` is constant within a step; see [`ChemoSampling`].
//!
//! By default `M` is the lumped mass and the reaction uses vertex
//! quadrature. With the consistent mass and centroid reaction, a sharp
//! initial tumor edge produces undershoots below zero and overshoots above
//! one, and the logistic term amplifies negative values exponentially; see
//! [`MassTreatment`].
//!
//! Values stay in `[0, 1]` only while `κ dt < 1`. Beyond that the step
//! equation has no small nonnegative root: linearized at zero it reads
//! `w = uⁿ⁻¹ / (1 − κ dt)`, and Newton either fails or returns negative values.

use std::path::Path;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{FemSpace, Field, PointInterpolator, ReactionRule};
use crate::sparse::{norm, CsrMatrix, SymmetricFactor};

const NEWTON_RTOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 25;

/// Surviving fraction after a radiotherapy dose of `z` Gy, `exp(−αz − βz²)`.
pub fn rt_surviving_fraction(z: f64, alpha_rt: f64, beta_rt: f64) -> Result<f64> {
    if !(z >= 0.0) {
        return Err(Error::invalid(format!("radiotherapy dose must be non-negative, got {z}")));
    }
    Ok((-alpha_rt * z - beta_rt * z * z).exp())
}

/// How the chemotherapy rate is held constant over an implicit step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChemoSampling {
    /// `C(tⁿ)` at the end of the step.
    Endpoint,
    /// `(1/dt) ∫ C(t) dt` over the step.
    ///
    /// With a clearance half-life of hours and a one-day step, the endpoint
    /// value is dominated by whether a dose happens to fall on the node; the
    /// step average is the exposure the cells actually see.
    #[default]
    StepAverage,
}

/// Treatment of the zeroth-order terms (time derivative, chemotherapy, reaction).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MassTreatment {
    /// Consistent mass and centroid-rule reaction.
    Consistent,
    /// Lumped mass and vertex-rule reaction; preserves `0 ≤ u ≤ 1`.
    #[default]
    Lumped,
}

impl MassTreatment {
    pub fn reaction_rule(self) -> ReactionRule {
        match self {
            MassTreatment::Consistent => ReactionRule::Centroid,
            MassTreatment::Lumped => ReactionRule::Vertex,
        }
    }
}

/// Radiotherapy fractions, chemotherapy doses, and pharmacodynamic constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TherapySchedule {
    /// `(time in days, dose in Gy)`.
    pub rt_events: Vec<(f64, f64)>,
    /// `(time in days, dose)`; a dose of zero is not administered.
    pub ct_doses: Vec<(f64, f64)>,
    pub alpha_rt: f64,
    pub beta_rt: f64,
    pub alpha_ct: f64,
    /// Clearance rate in 1/day.
    pub beta_ct_rate: f64,
    pub rt_gamma: f64,
    pub chemo_sampling: ChemoSampling,
}

impl Default for TherapySchedule {
    fn default() -> Self {
        TherapySchedule {
            rt_events: Vec::new(),
            ct_doses: Vec::new(),
            alpha_rt: 0.025,
            beta_rt: 0.0025,
            alpha_ct: 0.9,
            beta_ct_rate: std::f64::consts::LN_2 / (1.8 / 24.0),
            rt_gamma: 1.0,
            chemo_sampling: ChemoSampling::default(),
        }
    }
}

impl TherapySchedule {
    /// Default constants and no treatment.
    pub fn untreated() -> Self {
        Self::default()
    }

    /// Standard concurrent chemoradiation: 30 weekday fractions of 2 Gy over
    /// six weeks starting at `start_day`, with a daily chemotherapy dose on
    /// every day of those six weeks.
    pub fn stupp(start_day: f64) -> Self {
        let mut rt_events = Vec::with_capacity(30);
        for week in 0..6 {
            for day in 0..5 {
                rt_events.push((start_day + (7 * week + day) as f64, 2.0));
            }
        }
        let ct_doses = (0..42).map(|d| (start_day + d as f64, 1.0)).collect();
        TherapySchedule { rt_events, ct_doses, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_rt", self.alpha_rt),
            ("beta_rt", self.beta_rt),
            ("alpha_ct", self.alpha_ct),
            ("beta_ct_rate", self.beta_ct_rate),
            ("rt_gamma", self.rt_gamma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        for &(t, z) in self.rt_events.iter().chain(&self.ct_doses) {
            if !t.is_finite() || !(z >= 0.0) || !z.is_finite() {
                return Err(Error::invalid(format!("invalid therapy event ({t}, {z})")));
            }
        }
        Ok(())
    }

    /// Parses the schedule CSV (`type,time_days,dose`), keeping the constants of `self`.
    pub fn with_events_from_csv(&self, text: &str) -> Result<Self> {
        let mut out = TherapySchedule { rt_events: Vec::new(), ct_doses: Vec::new(), ..self.clone() };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::format("schedule", "empty file"))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols != ["type", "time_days", "dose"] {
            return Err(Error::format("schedule", format!("unexpected header {header:?}")));
        }
        for (k, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 3 {
                return Err(Error::format("schedule", format!("row {} has {} fields", k + 1, f.len())));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::format("schedule", format!("row {}: bad number {s:?}", k + 1)))
            };
            let ev = (num(f[1])?, num(f[2])?);
            match f[0] {
                "rt" => out.rt_events.push(ev),
                "ct" => out.ct_doses.push(ev),
                other => return Err(Error::format("schedule", format!("row {}: unknown type {other:?}", k + 1))),
            }
        }
        out.validate()?;
        Ok(out)
    }

    pub fn load_csv(&self, path: impl AsRef<Path>) -> Result<Self> {
        self.with_events_from_csv(&std::fs::read_to_string(path)?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("type,time_days,dose\n");
        for (t, z) in &self.rt_events {
            s.push_str(&format!("rt,{t},{z}\n"));
        }
        for (t, z) in &self.ct_doses {
            s.push_str(&format!("ct,{t},{z}\n"));
        }
        s
    }

    fn active_ct(&self) -> impl Iterator<Item = f64> + '_ {
        self.ct_doses.iter().filter(|d| d.1 > 0.0).map(|d| d.0)
    }

    /// Mean chemotherapy rate over `(a, b]`.
    fn chemo_average(&self, a: f64, b: f64) -> f64 {
        let beta = self.beta_ct_rate;
        let total: f64 = self
            .active_ct()
            .filter(|&tau| tau < b)
            .map(|tau| {
                let lo = a.max(tau) - tau;
                let hi = b - tau;
                if beta > 0.0 {
                    ((-beta * lo).exp() - (-beta * hi).exp()) / beta
                } else {
                    hi - lo
                }
            })
            .sum();
        self.alpha_ct * total / (b - a)
    }
}

/// Chemotherapy decay rate `α_ct Σ_{τ_k ≤ t} exp(−β_ct (t − τ_k))` in 1/day.
pub fn chemo_rate(t: f64, schedule: &TherapySchedule) -> f64 {
    schedule.alpha_ct
        * schedule
            .active_ct()
            .filter(|&tau| tau <= t)
            .map(|tau| (-schedule.beta_ct_rate * (t - tau)).exp())
            .sum::<f64>()
}

/// Uniform time grid `t0 + n·dt`, `n = 0..=N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t0: f64,
    tf: f64,
    dt: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, tf: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !(tf > t0) || !t0.is_finite() || !tf.is_finite() {
            return Err(Error::invalid(format!("invalid time grid t0={t0}, tf={tf}, dt={dt}")));
        }
        let steps = (tf - t0) / dt;
        let n_steps = steps.round() as usize;
        if (steps - n_steps as f64).abs() > 1e-9 * steps.max(1.0) {
            return Err(Error::invalid(format!("(tf − t0)/dt = {steps} is not an integer")));
        }
        Ok(TimeGrid { t0, tf, dt, n_steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn tf(&self) -> f64 {
        self.tf
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn time(&self, n: usize) -> f64 {
        self.t0 + n as f64 * self.dt
    }

    /// Node index of `t`, if it lies on the grid to 1e-9.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let s = (t - self.t0) / self.dt;
        let n = s.round();
        if (s - n).abs() <= 1e-9 && n >= 0.0 && n as usize <= self.n_steps {
            Some(n as usize)
        } else {
            None
        }
    }
}

/// Per-step treatment factors resolved against a grid; index `n` refers to
/// the step ending at node `n` (entry 0 is unused).
#[derive(Debug, Clone)]
pub struct StepPlan {
    pub chemo: Vec<f64>,
    pub rt_scale: Vec<f64>,
}

impl StepPlan {
    pub fn new(schedule: &TherapySchedule, grid: &TimeGrid) -> Result<Self> {
        schedule.validate()?;
        let n = grid.n_steps();
        let mut rt_scale = vec![1.0; n + 1];
        for &(t, z) in &schedule.rt_events {
            if t <= grid.t0() + 1e-9 * grid.dt() || t > grid.tf() + 1e-9 * grid.dt() {
                continue;
            }
            let k = grid
                .node_index(t)
                .ok_or_else(|| Error::invalid(format!("radiotherapy at day {t} is not on the time grid")))?;
            let s = rt_surviving_fraction(z, schedule.alpha_rt, schedule.beta_rt)?;
            rt_scale[k] *= 1.0 - schedule.rt_gamma * (1.0 - s);
        }
        let mut chemo = vec![0.0; n + 1];
        for (k, c) in chemo.iter_mut().enumerate().skip(1) {
            *c = match schedule.chemo_sampling {
                ChemoSampling::Endpoint => chemo_rate(grid.time(k), schedule),
                ChemoSampling::StepAverage => schedule.chemo_average(grid.time(k - 1), grid.time(k)),
            };
        }
        Ok(StepPlan { chemo, rt_scale })
    }
}

/// States at every grid node. At radiotherapy nodes both the pre-event
/// state (the implicit-step solution) and the post-event state are kept.
#[derive(Debug, Clone)]
pub struct StateTrajectory {
    grid: TimeGrid,
    states: Vec<Vec<f64>>,
    pre_event: Vec<Option<Vec<f64>>>,
}

impl StateTrajectory {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// State at node `n` (post-treatment at radiotherapy nodes).
    pub fn state(&self, n: usize) -> &[f64] {
        &self.states[n]
    }

    /// Implicit-step solution at node `n`, before any radiotherapy update.
    pub fn pre_event_state(&self, n: usize) -> &[f64] {
        self.pre_event[n].as_deref().unwrap_or(&self.states[n])
    }

    pub fn field(&self, n: usize) -> Field {
        Field::from_vec_unchecked(self.states[n].clone())
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().unwrap()
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }
}

/// Timed point observations with Gaussian noise variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub times: Vec<f64>,
    /// Flat coordinates, `dim` per point.
    pub points: Vec<f64>,
    pub dim: usize,
    /// One column of `n_points` values per observation time.
    pub data: Vec<Vec<f64>>,
    pub noise_variance: f64,
}

impl ObservationSet {
    pub fn new(times: Vec<f64>, points: Vec<f64>, dim: usize, data: Vec<Vec<f64>>, noise_variance: f64) -> Result<Self> {
        let set = ObservationSet { times, points, dim, data, noise_variance };
        set.validate()?;
        Ok(set)
    }

    /// No data at all; the likelihood is flat.
    pub fn empty(dim: usize) -> Self {
        ObservationSet { times: Vec::new(), points: Vec::new(), dim, data: Vec::new(), noise_variance: 1.0 }
    }

    pub fn n_points(&self) -> usize {
        self.points.len() / self.dim.max(1)
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.points.len() % self.dim != 0 {
            return Err(Error::invalid("observation points do not match dim"));
        }
        if self.data.len() != self.times.len() {
            return Err(Error::invalid("one data column per observation time is required"));
        }
        let np = self.n_points();
        if self.data.iter().any(|c| c.len() != np) {
            return Err(Error::invalid("data column length differs from the point count"));
        }
        if self.data.iter().flatten().chain(&self.points).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observation data".into()));
        }
        if !(self.noise_variance > 0.0) {
            return Err(Error::invalid("noise variance must be positive"));
        }
        Ok(())
    }

    /// Node index of every observation time on `grid`.
    pub fn node_indices(&self, grid: &TimeGrid) -> Result<Vec<usize>> {
        self.times
            .iter()
            .map(|&t| {
                grid.node_index(t)
                    .ok_or_else(|| Error::invalid(format!("observation time {t} is not a grid node")))
            })
            .collect()
    }

    /// Keeps only the observation times for which `keep` holds.
    pub fn subset(&self, keep: impl Fn(f64) -> bool) -> Self {
        let (times, data) = self
            .times
            .iter()
            .zip(&self.data)
            .filter(|(t, _)| keep(**t))
            .map(|(t, d)| (*t, d.clone()))
            .unzip();
        ObservationSet { times, data, ..self.clone() }
    }
}

/// Implicit-Euler/Newton integrator bound to a discretization, schedule and grid.
#[derive(Debug)]
pub struct ForwardSolver<'a> {
    space: &'a FemSpace,
    grid: TimeGrid,
    plan: StepPlan,
    mass: CsrMatrix,
    treatment: MassTreatment,
}

/// Jacobians `∂G/∂w` factored at each converged step, index `n − 1` for step `n`.
#[derive(Debug)]
pub struct StepJacobians {
    pub factors: Vec<SymmetricFactor>,
}

pub(crate) struct StepOperators {
    pub kappa: Vec<f64>,
    pub stiffness: CsrMatrix,
}

impl<'a> ForwardSolver<'a> {
    pub fn new(space: &'a FemSpace, schedule: &TherapySchedule, grid: TimeGrid) -> Result<Self> {
        Self::with_mass(space, schedule, grid, MassTreatment::default())
    }

    pub fn with_mass(
        space: &'a FemSpace,
        schedule: &TherapySchedule,
        grid: TimeGrid,
        treatment: MassTreatment,
    ) -> Result<Self> {
        let plan = StepPlan::new(schedule, &grid)?;
        let mass = match treatment {
            MassTreatment::Consistent => space.mass().clone(),
            MassTreatment::Lumped => space.lumped_mass_matrix(),
        };
        Ok(ForwardSolver { space, grid, plan, mass, treatment })
    }

    pub fn treatment(&self) -> MassTreatment {
        self.treatment
    }

    /// The mass matrix of the time derivative.
    pub fn time_mass(&self) -> &CsrMatrix {
        &self.mass
    }

    pub fn space(&self) -> &FemSpace {
        self.space
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn plan(&self) -> &StepPlan {
        &self.plan
    }

    pub fn solve(&self, m_d: &[f64], m_kappa: &[f64], u0: &[f64]) -> Result<StateTrajectory> {
        Ok(self.run(m_d, m_kappa, u0, false)?.0)
    }

    /// Solves and also returns the step Jacobians at the converged states.
    pub fn solve_with_jacobians(
        &self,
        m_d: &[f64],
        m_kappa: &[f64],
        u0: &[f64],
    ) -> Result<(StateTrajectory, StepJacobians)> {
        let (traj, factors) = self.run(m_d, m_kappa, u0, true)?;
        Ok((traj, StepJacobians { factors }))
    }

    pub(crate) fn operators(&self, m_d: &[f64], m_kappa: &[f64]) -> Result<StepOperators> {
        let n = self.space.n_vertices();
        if m_d.len() != n || m_kappa.len() != n {
            return Err(Error::invalid("parameter fields do not match the mesh"));
        }
        if m_d.iter().chain(m_kappa).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter fields".into()));
        }
        let diffusion = self.space.cell_exp_mean(m_d);
        let kappa = self.space.cell_exp_mean(m_kappa);
        if let Some(c) = diffusion.iter().chain(&kappa).position(|v| !v.is_finite()) {
            return Err(Error::Assembly {
                cell: c % self.space.n_cells(),
                message: "coefficient overflow".into(),
            });
        }
        let stiffness = self.space.stiffness_from_cell_coeffs(&diffusion);
        Ok(StepOperators { kappa, stiffness })
    }

    fn run(
        &self,
        m_d: &[f64],
        m_kappa: &[f64],
        u0: &[f64],
        keep_factors: bool,
    ) -> Result<(StateTrajectory, Vec<SymmetricFactor>)> {
        let space = self.space;
        let n = space.n_vertices();
        if u0.len() != n {
            return Err(Error::invalid("initial condition does not match the mesh"));
        }
        if u0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial condition".into()));
        }
        let ops = self.operators(m_d, m_kappa)?;
        let dt = self.grid.dt();
        let mass = &self.mass;

        let mut states = Vec::with_capacity(self.grid.n_steps() + 1);
        let mut pre_event = vec![None];
        let mut factors = Vec::new();
        states.push(u0.to_vec());
        let mut b = vec![0.0; n];
        let mut g = vec![0.0; n];
        for step in 1..=self.grid.n_steps() {
            let u_prev = states.last().unwrap();
            let c = self.plan.chemo[step];
            let linear = ops.stiffness.add_scaled(1.0 / dt + c, mass);
            let rhs: Vec<f64> = mass.matvec(u_prev).iter().map(|v| v / dt).collect();
            let floor = 1e-14 * norm(&rhs);
            let mut w = u_prev.clone();
            let mut res0 = None;
            let mut iter = 0;
            loop {
                linear.matvec_into(&w, &mut g);
                b.iter_mut().for_each(|v| *v = 0.0);
                let mut jac = linear.clone();
                space.reaction_rule_into(self.treatment.reaction_rule(), &ops.kappa, &w, &mut b, jac.values_mut(), -1.0);
                for i in 0..n {
                    g[i] -= rhs[i] + b[i];
                }
                let r = norm(&g);
                if !r.is_finite() {
                    return Err(Error::NonFinite(format!("state residual at step {step}")));
                }
                let r0 = *res0.get_or_insert(r);
                if r <= NEWTON_RTOL * r0 || r <= floor {
                    if keep_factors {
                        factors.push(space.factor(&jac)?);
                    }
                    break;
                }
                if iter == NEWTON_MAX_ITER {
                    return Err(Error::NewtonFailure { step, residual: r, iterations: iter });
                }
                let delta = space.factor(&jac)?.solve(&g);
                for i in 0..n {
                    w[i] -= delta[i];
                }
                iter += 1;
            }
            let s = self.plan.rt_scale[step];
            if s != 1.0 {
                let post: Vec<f64> = w.iter().map(|v| s * v).collect();
                pre_event.push(Some(w));
                states.push(post);
            } else {
                pre_event.push(None);
                states.push(w);
            }
        }
        Ok((StateTrajectory { grid: self.grid, states, pre_event }, factors))
    }
}

/// Solves the treated model on `space` from `u0` over `grid`.
pub fn solve_forward(
    space: &FemSpace,
    m_d: &Field,
    m_kappa: &Field,
    u0: &Field,
    schedule: &TherapySchedule,
    grid: TimeGrid,
) -> Result<StateTrajectory> {
    if u0.iter().any(|&v| !(-1e-12..=1.0 + 1e-12).contains(&v)) {
        return Err(Error::invalid("initial condition must lie in [0, 1]"));
    }
    ForwardSolver::new(space, schedule, grid)?.solve(m_d, m_kappa, u0)
}

/// Observable matrix: one column of point values per requested time.
pub fn observe(trajectory: &StateTrajectory, times: &[f64], interp: &PointInterpolator) -> Result<Vec<Vec<f64>>> {
    times
        .iter()
        .map(|&t| {
            let k = trajectory
                .grid()
                .node_index(t)
                .ok_or_else(|| Error::invalid(format!("observation time {t} is not a grid node")))?;
            Ok(interp.apply(trajectory.state(k)))
        })
        .collect()
}

/// Adds i.i.d. Gaussian noise with `σ = noise_percent/100 · max|clean|`.
///
/// Returns the noisy matrix and `σ²`, floored at `1e-12`.
pub fn add_noise(clean: &[Vec<f64>], noise_percent: f64, rng_seed: u64) -> Result<(Vec<Vec<f64>>, f64)> {
    if !(noise_percent >= 0.0) {
        return Err(Error::invalid("noise percent must be non-negative"));
    }
    let scale = clean.iter().flatten().fold(0.0_f64, |a, v| a.max(v.abs()));
    let sigma = noise_percent / 100.0 * scale;
    if sigma == 0.0 {
        return Ok((clean.to_vec(), 1e-12));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(rng_seed);
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let noisy = clean
        .iter()
        .map(|col| col.iter().map(|v| v + normal.sample(&mut rng)).collect())
        .collect();
    Ok((noisy, (sigma * sigma).max(1e-12)))
}
