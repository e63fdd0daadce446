use std::sync::Arc;

use tumortwin::fem::{FemSpace, Field};
use tumortwin::forward::{
    add_noise, chemo_rate, observe, rt_surviving_fraction, solve_forward, ChemoSampling, ForwardSolver, MassTreatment,
    StepPlan,
    TherapySchedule, TimeGrid,
};
use tumortwin::mesh::generate_structured;

fn space(n: usize) -> FemSpace {
    FemSpace::new(Arc::new(generate_structured(&[10.0, 10.0], &[n, n], 2).unwrap())).unwrap()
}

fn bump(space: &FemSpace) -> Field {
    Field::from_fn(space.mesh(), |x| 0.6 * (-((x[0] - 5.0).powi(2) + (x[1] - 4.0).powi(2)) / 4.0).exp())
}

#[test]
fn surviving_fraction_values() {
    assert_eq!(rt_surviving_fraction(0.0, 0.025, 0.0025).unwrap(), 1.0);
    let s = rt_surviving_fraction(2.0, 0.025, 0.0025).unwrap();
    assert!((s - (-0.06f64).exp()).abs() < 1e-15);
    assert!((s - 0.941765).abs() < 1e-6);
    let mut prev = 1.0;
    for k in 1..20 {
        let s = rt_surviving_fraction(k as f64 * 0.5, 0.025, 0.0025).unwrap();
        assert!(s < prev && s > 0.0);
        prev = s;
    }
    assert!(rt_surviving_fraction(-1.0, 0.025, 0.0025).is_err());
}

#[test]
fn chemo_rate_matches_direct_sum() {
    let sched = TherapySchedule { ct_doses: vec![(3.0, 1.0), (4.5, 1.0)], ..TherapySchedule::default() };
    assert_eq!(chemo_rate(2.9, &sched), 0.0);
    assert!((chemo_rate(3.0, &sched) - sched.alpha_ct).abs() < 1e-15);
    let b = sched.beta_ct_rate;
    for t in [3.2, 4.5, 5.0, 7.25] {
        let mut oracle = sched.alpha_ct * (-(b * (t - 3.0))).exp();
        if t >= 4.5 {
            oracle += sched.alpha_ct * (-(b * (t - 4.5))).exp();
        }
        assert!((chemo_rate(t, &sched) - oracle).abs() < 1e-15);
    }
    assert!((b - 9.2420).abs() < 1e-4);
}

#[test]
fn step_average_is_the_integral_mean() {
    let sched = TherapySchedule { ct_doses: vec![(2.0, 1.0), (3.0, 0.0)], ..TherapySchedule::default() };
    let grid = TimeGrid::new(0.0, 5.0, 1.0).unwrap();
    let plan = StepPlan::new(&sched, &grid).unwrap();
    // midpoint rule with many panels as the oracle
    for k in 1..=5 {
        let (a, bnd) = ((k - 1) as f64, k as f64);
        let n = 200_000;
        let h = (bnd - a) / n as f64;
        let mean: f64 = (0..n).map(|i| chemo_rate(a + (i as f64 + 0.5) * h, &sched)).sum::<f64>() * h;
        assert!((plan.chemo[k] - mean).abs() < 1e-6, "step {k}: {} vs {mean}", plan.chemo[k]);
    }
    assert_eq!(plan.chemo[1], 0.0);
    assert_eq!(plan.chemo[2], 0.0);
    let ep = StepPlan::new(&TherapySchedule { chemo_sampling: ChemoSampling::Endpoint, ..sched }, &grid).unwrap();
    assert!((ep.chemo[2] - 0.9).abs() < 1e-15);
}

#[test]
fn frozen_dynamics_are_stationary() {
    let s = space(6);
    let u0 = bump(&s);
    let off = Field::constant(s.mesh(), -60.0);
    let grid = TimeGrid::new(0.0, 10.0, 1.0).unwrap();
    let traj = solve_forward(&s, &off, &off, &u0, &TherapySchedule::untreated(), grid).unwrap();
    assert_eq!(traj.len(), 11);
    assert_eq!(traj.state(0), u0.values());
    for n in 0..=10 {
        for (a, b) in traj.state(n).iter().zip(u0.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn uniform_state_follows_scalar_logistic_oracle() {
    let s = space(5);
    let u0 = Field::constant(s.mesh(), 0.1);
    let md = Field::from_fn(s.mesh(), |x| -1.0 + 0.1 * x[0]);
    let mk = Field::constant(s.mesh(), 0.15f64.ln());
    let grid = TimeGrid::new(0.0, 30.0, 1.0).unwrap();
    let traj = solve_forward(&s, &md, &mk, &u0, &TherapySchedule::untreated(), grid).unwrap();
    let (k, dt): (f64, f64) = (0.15, 1.0);
    let mut u = 0.1f64;
    for n in 0..=30 {
        for v in traj.state(n) {
            assert!((v - u).abs() < 1e-10, "node {n}: {v} vs {u}");
        }
        // implicit Euler for u' = k u (1 − u): k dt w² + (1 − k dt) w − u = 0
        let a = k * dt;
        u = (-(1.0 - a) + ((1.0 - a).powi(2) + 4.0 * a * u).sqrt()) / (2.0 * a);
    }
}

#[test]
fn radiotherapy_scales_the_state() {
    let s = space(4);
    let u0 = Field::constant(s.mesh(), 0.3);
    let md = Field::constant(s.mesh(), -2.0);
    let mk = Field::constant(s.mesh(), -60.0);
    let sched = TherapySchedule { rt_events: vec![(2.0, 2.0)], ..TherapySchedule::default() };
    let grid = TimeGrid::new(0.0, 4.0, 1.0).unwrap();
    let traj = solve_forward(&s, &md, &mk, &u0, &sched, grid).unwrap();
    for (post, pre) in traj.state(2).iter().zip(traj.pre_event_state(2)) {
        assert!((post - 0.941765 * pre).abs() < 1e-6 * pre);
        assert!((post / pre - (-0.06f64).exp()).abs() < 1e-14);
    }
    assert!((traj.state(4)[0] - 0.3 * (-0.06f64).exp()).abs() < 1e-12);
}

#[test]
fn radiotherapy_commutes_with_observation() {
    let s = space(6);
    let u0 = bump(&s);
    let md = Field::constant(s.mesh(), -1.0);
    let mk = Field::constant(s.mesh(), (0.15f64).ln());
    let sched = TherapySchedule { rt_events: vec![(3.0, 2.0)], ..TherapySchedule::default() };
    let grid = TimeGrid::new(0.0, 5.0, 1.0).unwrap();
    let traj = solve_forward(&s, &md, &mk, &u0, &sched, grid).unwrap();
    let pts = [2.5, 3.5, 5.0, 5.0, 7.3, 1.1];
    let b = s.interpolator(&pts).unwrap();
    let post = observe(&traj, &[3.0], &b).unwrap();
    let pre = b.apply(traj.pre_event_state(3));
    let sf = rt_surviving_fraction(2.0, 0.025, 0.0025).unwrap();
    for (a, p) in post[0].iter().zip(&pre) {
        assert!((a - sf * p).abs() < 1e-15);
    }
}

#[test]
fn chemotherapy_decays_a_frozen_state() {
    let s = space(3);
    let u0 = Field::constant(s.mesh(), 0.5);
    let off = Field::constant(s.mesh(), -60.0);
    let sched = TherapySchedule { ct_doses: vec![(0.0, 1.0), (1.0, 1.0)], ..TherapySchedule::default() };
    let grid = TimeGrid::new(0.0, 3.0, 1.0).unwrap();
    let plan = StepPlan::new(&sched, &grid).unwrap();
    let traj = solve_forward(&s, &off, &off, &u0, &sched, grid).unwrap();
    let mut u = 0.5;
    for n in 1..=3 {
        u /= 1.0 + plan.chemo[n];
        assert!((traj.state(n)[0] - u).abs() < 1e-12);
    }
}

#[test]
fn uniform_untreated_stays_uniform() {
    let s = space(6);
    let u0 = Field::constant(s.mesh(), 0.37);
    let md = Field::from_fn(s.mesh(), |x| (x[0] * 0.7).sin() - 1.0);
    let mk = Field::constant(s.mesh(), -2.0);
    let traj = solve_forward(&s, &md, &mk, &u0, &TherapySchedule::untreated(), TimeGrid::new(0.0, 8.0, 1.0).unwrap())
        .unwrap();
    for n in 0..=8 {
        let st = traj.state(n);
        let spread = st.iter().fold(0.0f64, |a, v| a.max((v - st[0]).abs()));
        assert!(spread < 1e-12);
    }
}

#[test]
fn values_stay_in_unit_interval() {
    let s = FemSpace::new(Arc::new(generate_structured(&[100.0, 100.0], &[40, 40], 2).unwrap())).unwrap();
    let u0 = Field::from_fn(s.mesh(), |x| {
        let r = (x[0] - 50.0).hypot(x[1] - 50.0);
        if r < 8.0 {
            0.8
        } else if r < 14.0 {
            0.16
        } else {
            0.0
        }
    });
    let md = Field::from_fn(s.mesh(), |x| if x[0] < 50.0 { 0.03f64.ln() } else { 0.3f64.ln() });
    let mk = Field::constant(s.mesh(), 0.15f64.ln());
    for sched in [TherapySchedule::untreated(), TherapySchedule::stupp(14.0)] {
        let traj = solve_forward(&s, &md, &mk, &u0, &sched, TimeGrid::new(0.0, 112.0, 1.0).unwrap()).unwrap();
        for st in traj.states() {
            assert!(st.iter().all(|v| (-1e-8..=1.0 + 1e-8).contains(v)));
        }
    }
}

#[test]
fn consistent_mass_variant_matches_logistic_oracle() {
    let s = space(4);
    let u0 = Field::constant(s.mesh(), 0.2);
    let md = Field::constant(s.mesh(), -1.0);
    let mk = Field::constant(s.mesh(), 0.3f64.ln());
    let sched = TherapySchedule::untreated();
    let solver =
        ForwardSolver::with_mass(&s, &sched, TimeGrid::new(0.0, 5.0, 1.0).unwrap(), MassTreatment::Consistent).unwrap();
    let traj = solver.solve(&md, &mk, &u0).unwrap();
    let a: f64 = 0.3;
    let mut u: f64 = 0.2;
    for n in 0..=5 {
        assert!(traj.state(n).iter().all(|v| (v - u).abs() < 1e-10));
        u = (-(1.0 - a) + ((1.0 - a).powi(2) + 4.0 * a * u).sqrt()) / (2.0 * a);
    }
}

#[test]
fn time_stepping_is_first_order() {
    let s = space(8);
    let u0 = bump(&s);
    let md = Field::constant(s.mesh(), 0.5f64.ln());
    let mk = Field::constant(s.mesh(), 0.3f64.ln());
    let sched = TherapySchedule::untreated();
    let run = |dt: f64| {
        solve_forward(&s, &md, &mk, &u0, &sched, TimeGrid::new(0.0, 4.0, dt).unwrap())
            .unwrap()
            .final_state()
            .to_vec()
    };
    let dt = 0.25;
    let reference = run(dt / 8.0);
    let err = |v: Vec<f64>| v.iter().zip(&reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let ratio = err(run(2.0 * dt)) / err(run(dt));
    assert!((ratio - 2.0).abs() <= 0.3, "ratio {ratio}");
}

#[test]
fn grid_validation() {
    assert!(TimeGrid::new(0.0, 10.0, 0.3).is_err());
    assert!(TimeGrid::new(0.0, -1.0, 1.0).is_err());
    assert!(TimeGrid::new(0.0, 1.0, 0.0).is_err());
    let g = TimeGrid::new(0.0, 84.0, 1.0).unwrap();
    assert_eq!(g.n_steps(), 84);
    assert_eq!(g.node_index(84.0), Some(84));
    assert_eq!(g.node_index(3.5), None);
    assert_eq!(g.node_index(85.0), None);
}

#[test]
fn off_grid_radiotherapy_is_rejected() {
    let sched = TherapySchedule { rt_events: vec![(2.5, 2.0)], ..TherapySchedule::default() };
    let s = space(2);
    assert!(ForwardSolver::new(&s, &sched, TimeGrid::new(0.0, 4.0, 1.0).unwrap()).is_err());
}

#[test]
fn observe_returns_interpolated_states() {
    let s = space(5);
    let u0 = Field::from_fn(s.mesh(), |x| 0.01 * x[0] + 0.02 * x[1]);
    let md = Field::constant(s.mesh(), -1.0);
    let mk = Field::constant(s.mesh(), -1.0);
    let grid = TimeGrid::new(0.0, 3.0, 1.0).unwrap();
    let traj = solve_forward(&s, &md, &mk, &u0, &TherapySchedule::untreated(), grid).unwrap();
    let pts = [1.0, 2.0, 9.9, 0.1, 4.4, 4.4];
    let b = s.interpolator(&pts).unwrap();
    let obs = observe(&traj, &[0.0, 2.0, 3.0], &b).unwrap();
    for (p, v) in pts.chunks(2).zip(&obs[0]) {
        assert!((v - (0.01 * p[0] + 0.02 * p[1])).abs() < 1e-14);
    }
    for (col, n) in obs.iter().skip(1).zip([2, 3]) {
        assert_eq!(col, &b.apply(traj.state(n)));
    }
    assert!(observe(&traj, &[1.5], &b).is_err());
}

#[test]
fn noise_is_deterministic_and_calibrated() {
    let clean: Vec<Vec<f64>> = (0..100).map(|j| (0..1000).map(|i| ((i + j) as f64 * 0.01).sin()).collect()).collect();
    let (same, var0) = add_noise(&clean, 0.0, 1).unwrap();
    assert_eq!(same, clean);
    assert_eq!(var0, 1e-12);
    let (a, var) = add_noise(&clean, 2.0, 42).unwrap();
    let (b, _) = add_noise(&clean, 2.0, 42).unwrap();
    assert_eq!(a, b);
    let max = clean.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let sigma = 0.02 * max;
    assert!((var - sigma * sigma).abs() < 1e-15);
    let diffs: Vec<f64> = a.iter().flatten().zip(clean.iter().flatten()).map(|(x, y)| x - y).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((sd / sigma - 1.0).abs() < 0.02);
}

#[test]
fn schedule_csv_round_trip() {
    let s = TherapySchedule::stupp(14.0);
    let parsed = TherapySchedule::default().with_events_from_csv(&s.to_csv()).unwrap();
    assert_eq!(parsed, s);
    assert_eq!(s.rt_events.len(), 30);
    assert_eq!(s.rt_events.last().unwrap().0, 14.0 + 39.0);
    assert_eq!(s.ct_doses.last().unwrap().0, 55.0);
    assert!(TherapySchedule::default().with_events_from_csv("type,time,dose\n").is_err());
    assert!(TherapySchedule::default().with_events_from_csv("type,time_days,dose\nxx,1,2\n").is_err());
}

