#![allow(dead_code)]

pub mod oracles;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use tumortwin::fem::{FemSpace, Field};
use tumortwin::forward::{add_noise, observe, ForwardSolver, MassTreatment, ObservationSet, TherapySchedule, TimeGrid};
use tumortwin::inverse::{InverseProblem, ParameterLayout};
use tumortwin::mesh::{assign_labels, generate_structured, Tissue};
use tumortwin::prior::{BlockPrior, GrfPrior, LayoutKind};

pub fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn labeled_space(n: usize, extent: f64) -> Arc<FemSpace> {
    let mesh = generate_structured(&[extent, extent], &[n, n], 2).unwrap();
    let mesh = assign_labels(&mesh, |x| if x[0] < extent / 2.0 { Tissue::Gray } else { Tissue::White });
    Arc::new(FemSpace::new(Arc::new(mesh)).unwrap())
}

pub fn bump(space: &FemSpace, extent: f64) -> Vec<f64> {
    let c = extent / 2.0;
    Field::from_fn(space.mesh(), |x| 0.7 * (-((x[0] - c).powi(2) + (x[1] - 0.9 * c).powi(2)) / (0.08 * extent * extent)).exp())
        .into_values()
}

pub fn block_prior(space: &Arc<FemSpace>, kind: LayoutKind, rho: f64) -> BlockPrior {
    let n = space.n_vertices();
    let specs: Vec<(&str, f64, f64)> = match kind {
        LayoutKind::Nodal => vec![("m_D", -1.3, 0.05), ("m_kappa", -1.0, 0.02)],
        LayoutKind::GrayWhite => vec![("m_D_gray", -1.5, 0.1), ("m_D_white", -1.0, 0.1), ("m_kappa", -1.2, 0.04)],
    };
    BlockPrior::new(
        specs
            .into_iter()
            .map(|(name, mean, var)| (name.to_string(), GrfPrior::from_variance(space.clone(), vec![mean; n], var, rho).unwrap()))
            .collect(),
    )
    .unwrap()
}

pub struct Twin {
    pub space: Arc<FemSpace>,
    pub problem: InverseProblem,
    pub truth: Vec<f64>,
}

/// A small treated twin: radiotherapy and chemotherapy inside the window,
/// observations at node 0, at a radiotherapy node, and at the end.
pub fn small_twin(kind: LayoutKind, treatment: MassTreatment, noise_percent: f64, zero_noise_at_truth: bool) -> Twin {
    let extent = 10.0;
    let space = labeled_space(6, extent);
    let grid = TimeGrid::new(0.0, 6.0, 1.0).unwrap();
    let schedule = TherapySchedule {
        rt_events: vec![(2.0, 2.0), (3.0, 2.0)],
        ct_doses: vec![(2.0, 1.0), (3.0, 1.0)],
        ..TherapySchedule::default()
    };
    let layout = ParameterLayout::for_space(kind, &space);
    let prior = block_prior(&space, kind, 6.0);
    let mean = prior.mean();
    let truth: Vec<f64> = mean.iter().zip(random_vec(mean.len(), 5)).map(|(m, r)| m + 0.3 * r).collect();
    let u0 = bump(&space, extent);
    let mut r = rng(9);
    let points: Vec<f64> = (0..30).map(|_| r.random_range(0.5..9.5)).collect();
    let times = vec![0.0, 2.0, 4.0, 6.0];
    let (md, mk) = layout.split(&truth);
    let traj = ForwardSolver::with_mass(&space, &schedule, grid, treatment).unwrap().solve(&md, &mk, &u0).unwrap();
    let interp = space.interpolator(&points).unwrap();
    let clean = observe(&traj, &times, &interp).unwrap();
    let (data, var) = add_noise(&clean, noise_percent, 17).unwrap();
    let var = if zero_noise_at_truth { 1e-4 } else { var };
    let obs = ObservationSet::new(times, points, 2, data, var).unwrap();
    let problem =
        InverseProblem::new(space.clone(), grid, schedule, obs, u0, layout, prior).unwrap().with_mass_treatment(treatment);
    Twin { space, problem, truth }
}

/// Knobs for a configurable twin on a square box.
#[derive(Clone, Copy)]
pub struct TwinSpec {
    pub cells: usize,
    pub extent: f64,
    pub days: f64,
    /// Observation points per axis on a regular interior lattice.
    pub lattice: usize,
    /// Observe every `cadence` days, starting at day 0.
    pub cadence: usize,
    pub noise_percent: f64,
    pub rho: f64,
    pub kind: LayoutKind,
}

impl Default for TwinSpec {
    fn default() -> Self {
        TwinSpec {
            cells: 10,
            extent: 20.0,
            days: 8.0,
            lattice: 12,
            cadence: 1,
            noise_percent: 1.0,
            rho: 10.0,
            kind: LayoutKind::Nodal,
        }
    }
}

pub fn smooth_truth(space: &FemSpace, prior: &BlockPrior, extent: f64) -> Vec<f64> {
    let n = space.n_vertices();
    let mean = prior.mean();
    let mut truth = mean.clone();
    for b in 0..prior.n_blocks() {
        let phase = 0.7 * b as f64;
        for i in 0..n {
            let x = space.mesh().vertex(i);
            let s = (std::f64::consts::PI * x[0] / extent + phase).sin() * (std::f64::consts::PI * x[1] / extent).cos();
            truth[b * n + i] += 0.25 * s;
        }
    }
    truth
}

/// Twin with data generated on the inversion mesh itself. A noise level of
/// zero uses clean data with the variance implied by one percent.
pub fn twin(spec: TwinSpec) -> Twin {
    let space = labeled_space(spec.cells, spec.extent);
    let grid = TimeGrid::new(0.0, spec.days, 1.0).unwrap();
    let schedule = TherapySchedule {
        rt_events: vec![(3.0, 2.0), (4.0, 2.0)],
        ct_doses: vec![(3.0, 1.0), (4.0, 1.0)],
        ..TherapySchedule::default()
    };
    let layout = ParameterLayout::for_space(spec.kind, &space);
    let prior = block_prior(&space, spec.kind, spec.rho);
    let truth = smooth_truth(&space, &prior, spec.extent);
    let u0 = bump(&space, spec.extent);
    let h = spec.extent / (spec.lattice + 1) as f64;
    let mut points = Vec::new();
    for j in 1..=spec.lattice {
        for i in 1..=spec.lattice {
            points.extend([i as f64 * h, j as f64 * h]);
        }
    }
    let times: Vec<f64> = (0..=spec.days as usize).step_by(spec.cadence).map(|d| d as f64).collect();
    let (md, mk) = layout.split(&truth);
    let traj = ForwardSolver::new(&space, &schedule, grid).unwrap().solve(&md, &mk, &u0).unwrap();
    let interp = space.interpolator(&points).unwrap();
    let clean = observe(&traj, &times, &interp).unwrap();
    let (data, var) = if spec.noise_percent > 0.0 {
        add_noise(&clean, spec.noise_percent, 23).unwrap()
    } else {
        let (_, var) = add_noise(&clean, 1.0, 23).unwrap();
        (clean, var)
    };
    let obs = ObservationSet::new(times, points, 2, data, var).unwrap();
    let problem = InverseProblem::new(space.clone(), grid, schedule, obs, u0, layout, prior).unwrap();
    Twin { space, problem, truth }
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
