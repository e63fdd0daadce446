//! Acceptance criteria. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line even when another one fails.
//!
//! `cargo test --test acceptance -- 3 7` runs criteria 3 and 7 only.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::oracles::*;
use common::*;
use rand::{Rng, SeedableRng};
use tumortwin::dataio::{ImageGeometry, ManifestEntry, ObservationManifest, VoxelImage};
use tumortwin::fem::{FemSpace, Field};
use tumortwin::forward::{rt_surviving_fraction, solve_forward, ObservationSet, TherapySchedule, TimeGrid};
use tumortwin::inverse::HessianMode;
use tumortwin::laplace::{LaplaceOptions, LowRankPosterior};
use tumortwin::map_solver::{compute_map, NewtonOptions};
use tumortwin::mesh::{generate_structured, load_mesh, save_mesh};
use tumortwin::prior::{from_hyperparameters, robin_coefficient, GrfPrior};
use tumortwin::qoi::{ccc, dice, tv, ttc, PushforwardResult, QoiKind, SampleRecord};
use tumortwin::study::{self, levene, mann_whitney_u, run_frequency_study, summarize, Cadence, ScenarioConfig};

/// Collects the checks of one criterion and reports them on one line.
struct Criterion {
    checks: Vec<(String, bool)>,
    notes: Vec<String>,
}

impl Criterion {
    fn new() -> Self {
        Criterion { checks: Vec::new(), notes: Vec::new() }
    }

    fn check(&mut self, label: impl Into<String>, ok: bool) {
        self.checks.push((label.into(), ok));
    }

    fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn shifted(x: &[f64], d: &[f64], h: f64) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + h * b).collect()
}

/// 20×20 twin with two observation times and treatment inside the window.
fn twin_20x20(noise_percent: f64) -> Twin {
    let mut t = twin(TwinSpec { cells: 20, cadence: 4, noise_percent, ..TwinSpec::default() });
    let obs = t.problem.observations().subset(|time| time > 0.0);
    t.problem = t.problem.with_observations(obs).unwrap();
    t
}

fn c1_adjoint_gradient(c: &mut Criterion) {
    let t = twin_20x20(2.0);
    let p = &t.problem;
    c.check("2 observation times", p.observations().n_times() == 2);
    c.check("therapy inside the window", p.schedule().rt_events.iter().any(|e| e.0 < p.grid().tf()));
    let mean = p.prior().mean();
    let mut worst = 0.0f64;
    for seed in 1..=3u64 {
        let theta: Vec<f64> = mean.iter().zip(random_vec(mean.len(), seed)).map(|(m, r)| m + 0.2 * r).collect();
        let dir = random_vec(p.dim(), 100 + seed);
        let analytic = dot(&p.linearize(&theta).unwrap().misfit_gradient, &dir);
        let err = [1e-4, 1e-5, 1e-6]
            .iter()
            .map(|&h| {
                let fd = (p.misfit_cost(&shifted(&theta, &dir, h)).unwrap() - p.misfit_cost(&shifted(&theta, &dir, -h)).unwrap())
                    / (2.0 * h);
                rel(fd, analytic)
            })
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(err);
        c.check(format!("point {seed}: rel err {err:.2e} < 1e-5"), err < 1e-5);
    }
    c.note(format!("worst rel err {worst:.2e}"));
}

fn c2_hessian(c: &mut Criterion) {
    let t = twin_20x20(2.0);
    let p = &t.problem;
    let mean = p.prior().mean();
    let theta: Vec<f64> = mean.iter().zip(random_vec(mean.len(), 11)).map(|(m, r)| m + 0.2 * r).collect();
    let lin = p.linearize(&theta).unwrap();
    let (a, b) = (random_vec(p.dim(), 1), random_vec(p.dim(), 2));
    let ha = p.misfit_hessian_action(&lin, &a, HessianMode::GaussNewton);
    let hb = p.misfit_hessian_action(&lin, &b, HessianMode::GaussNewton);
    let sym = rel(dot(&ha, &b), dot(&a, &hb));
    c.check(format!("GN symmetry {sym:.2e} < 1e-8"), sym < 1e-8);

    let dir = random_vec(p.dim(), 22);
    let hv = p.misfit_hessian_action(&lin, &dir, HessianMode::Full);
    let h = 1e-5;
    let gp = p.linearize(&shifted(&theta, &dir, h)).unwrap().misfit_gradient;
    let gm = p.linearize(&shifted(&theta, &dir, -h)).unwrap().misfit_gradient;
    let fd: Vec<f64> = gp.iter().zip(&gm).map(|(x, y)| (x - y) / (2.0 * h)).collect();
    let err = norm(&sub(&fd, &hv)) / norm(&fd);
    c.check(format!("full Hessian vs FD of gradient {err:.2e} < 1e-4"), err < 1e-4);

    let clean = twin(TwinSpec { cells: 20, cadence: 4, noise_percent: 0.0, ..TwinSpec::default() });
    let lin = clean.problem.linearize(&clean.truth).unwrap();
    let v = random_vec(clean.problem.dim(), 5);
    let full = clean.problem.misfit_hessian_action(&lin, &v, HessianMode::Full);
    let gn = clean.problem.misfit_hessian_action(&lin, &v, HessianMode::GaussNewton);
    let gap = norm(&sub(&full, &gn)) / norm(&gn);
    c.check(format!("full = GN at zero residual {gap:.2e} < 1e-8"), gap < 1e-8);
}

fn c3_dense_laplace(c: &mut Criterion) {
    let t = twin(TwinSpec { cells: 6, lattice: 8, ..TwinSpec::default() });
    c.check(format!("{} vertices <= 200", t.space.n_vertices()), t.space.n_vertices() <= 200);
    let d = dense(&t.problem, &t.truth);
    let reference = dense_gevp(&d);
    let post = LowRankPosterior::build(&t.problem, &t.truth, &LaplaceOptions { seed: 4, ..LaplaceOptions::default() }).unwrap();
    let ev = post.eigenvalues();
    let mut worst = 0.0f64;
    let mut compared = 0;
    for (j, lam) in reference.iter().enumerate().take_while(|(_, l)| **l > 0.1 * reference[0]) {
        worst = worst.max(rel(ev[j], *lam));
        compared += 1;
    }
    c.check(format!("{compared} eigenvalues above 0.1 λ_1, worst rel err {worst:.2e} < 1e-6"), compared > 0 && worst < 1e-6);

    let n = t.problem.dim();
    let full = LowRankPosterior::build(&t.problem, &t.truth, &LaplaceOptions { rank: n, oversample: 10, seed: 1 }).unwrap();
    let inverse = (&d.h + &d.r).try_inverse().unwrap();
    let ours = columns(n, |e| full.covariance_apply(e));
    let err = (&ours - &inverse).amax() / inverse.amax();
    c.check(format!("k = n covariance vs dense inverse {err:.2e} < 1e-6"), err < 1e-6);
}

fn c4_posterior_sampling(c: &mut Criterion) {
    let t = twin(TwinSpec { cells: 6, lattice: 8, ..TwinSpec::default() });
    c.check(format!("{} vertices <= 100", t.space.n_vertices()), t.space.n_vertices() <= 100);
    let post = LowRankPosterior::build(&t.problem, &t.truth, &LaplaceOptions { rank: 20, ..LaplaceOptions::default() }).unwrap();
    let (worst, violations) = mc_covariance_check(&post, t.problem.prior(), 100_000, 5);
    c.check(format!("1e5 draws: {violations} entries beyond 5 SE (max z {worst:.2})"), violations == 0);

    let mut r = rng(77);
    let mut worst_id = 0.0f64;
    for _ in 0..100_000 {
        let lambda = 10f64.powf(r.random_range(-12.0..12.0));
        let dd = 1.0 - 1.0 / (1.0 + lambda).sqrt();
        worst_id = worst_id.max((2.0 * dd - dd * dd - lambda / (1.0 + lambda)).abs());
    }
    c.check(format!("2d − d² = λ/(1+λ) within {worst_id:.1e} <= 1e-14"), worst_id <= 1e-14);
}

fn c5_prior_statistics(c: &mut Criterion) {
    let extent = 100.0;
    let s = Arc::new(FemSpace::new(Arc::new(generate_structured(&[extent, extent], &[40, 40], 2).unwrap())).unwrap());
    let n = s.n_vertices();
    let (sigma2, rho) = (0.05, 20.0);
    let prior = GrfPrior::from_variance(s.clone(), vec![-1.3; n], sigma2, rho).unwrap();
    let n_samples = 10_000;
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let (mut sum, mut sum2) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..n_samples {
        let x = prior.sample_with(&mut r);
        for i in 0..n {
            sum[i] += x[i];
            sum2[i] += x[i] * x[i];
        }
    }
    let ns = n_samples as f64;
    let interior: Vec<usize> =
        (0..n).filter(|&i| s.mesh().vertex(i).iter().all(|x| *x >= rho && *x <= extent - rho)).collect();
    let worst = interior
        .iter()
        .map(|&i| {
            let m = sum[i] / ns;
            ((sum2[i] / ns - m * m) / sigma2 - 1.0).abs()
        })
        .fold(0.0f64, f64::max);
    c.check(format!("{} interior vertices, worst variance deviation {:.1}% < 15%", interior.len(), 100.0 * worst), worst < 0.15);

    let (gamma, delta) = from_hyperparameters(sigma2, rho).unwrap();
    let corner_ratio = |robin: f64| {
        let var = GrfPrior::new(s.clone(), vec![0.0; n], gamma, delta, robin).unwrap().pointwise_variance();
        var[0] / var[n / 2]
    };
    let (neumann, robin) = (corner_ratio(0.0), corner_ratio(robin_coefficient(gamma, delta)));
    c.check(
        format!("boundary/interior variance ratio {neumann:.2} without Robin, {robin:.2} with"),
        (robin - 1.0).abs() < (neumann - 1.0).abs(),
    );
}

fn c6_forward(c: &mut Criterion) {
    let s = FemSpace::new(Arc::new(generate_structured(&[10.0, 10.0], &[6, 6], 2).unwrap())).unwrap();
    let u0 = Field::constant(s.mesh(), 0.1);
    let md = Field::from_fn(s.mesh(), |x| -1.0 + 0.1 * x[0]);
    let mk = Field::constant(s.mesh(), 0.15f64.ln());
    let traj = solve_forward(&s, &md, &mk, &u0, &TherapySchedule::untreated(), TimeGrid::new(0.0, 30.0, 1.0).unwrap()).unwrap();
    let a = 0.15;
    let mut u = 0.1f64;
    let mut worst = 0.0f64;
    for n in 0..=30 {
        worst = traj.state(n).iter().fold(worst, |w, v| w.max((v - u).abs()));
        u = (-(1.0 - a) + ((1.0 - a) * (1.0 - a) + 4.0 * a * u).sqrt()) / (2.0 * a);
    }
    c.check(format!("uniform state vs scalar implicit Euler {worst:.1e} < 1e-10"), worst < 1e-10);

    let sf = rt_surviving_fraction(2.0, 0.025, 0.0025).unwrap();
    c.check(format!("surviving fraction at 2 Gy {sf:.15}"), (sf - (-0.06f64).exp()).abs() < 1e-15);
    let frozen = Field::constant(s.mesh(), -60.0);
    let u03 = Field::constant(s.mesh(), 0.3);
    let sched = TherapySchedule { rt_events: vec![(2.0, 2.0)], ..TherapySchedule::default() };
    let traj = solve_forward(&s, &Field::constant(s.mesh(), -2.0), &frozen, &u03, &sched, TimeGrid::new(0.0, 4.0, 1.0).unwrap()).unwrap();
    let scale = traj.state(2)[0] / traj.pre_event_state(2)[0];
    c.check(format!("2 Gy fraction scales the state by {scale:.12}"), (scale - (-0.06f64).exp()).abs() < 1e-14);

    let bump = Field::from_fn(s.mesh(), |x| 0.6 * (-((x[0] - 5.0).powi(2) + (x[1] - 4.0).powi(2)) / 4.0).exp());
    let s8 = FemSpace::new(Arc::new(generate_structured(&[10.0, 10.0], &[8, 8], 2).unwrap())).unwrap();
    let bump8 = Field::from_fn(s8.mesh(), |x| 0.6 * (-((x[0] - 5.0).powi(2) + (x[1] - 4.0).powi(2)) / 4.0).exp());
    drop(bump);
    let (md8, mk8) = (Field::constant(s8.mesh(), 0.5f64.ln()), Field::constant(s8.mesh(), 0.3f64.ln()));
    let run = |dt: f64| {
        solve_forward(&s8, &md8, &mk8, &bump8, &TherapySchedule::untreated(), TimeGrid::new(0.0, 4.0, dt).unwrap())
            .unwrap()
            .final_state()
            .to_vec()
    };
    let reference = run(0.25 / 8.0);
    let err = |v: Vec<f64>| norm(&sub(&v, &reference));
    let ratio = err(run(0.5)) / err(run(0.25));
    c.check(format!("dt convergence ratio {ratio:.3} in 2.0 ± 0.3"), (ratio - 2.0).abs() <= 0.3);
}

fn c7_frequency_study(c: &mut Criterion) {
    let cfg = ScenarioConfig::default();
    c.note(format!("{} cores", rayon::current_num_threads()));
    let report = run_frequency_study(&cfg, None).unwrap();
    let get = |cad: Cadence| report.cadence(cad).unwrap();
    let (d, w, f) = (get(Cadence::Daily), get(Cadence::Weekly), get(Cadence::Fortnightly));
    c.check(
        format!("observation times {}/{}/{}", d.n_observation_times, w.n_observation_times, f.n_observation_times),
        (d.n_observation_times, w.n_observation_times, f.n_observation_times) == (85, 13, 7),
    );
    for r in [d, w, f] {
        c.check(format!("{} MAP converged", r.cadence.name()), r.map.converged);
    }
    let (ed, ew, ef) = (d.posterior.eigenvalues(), w.posterior.eigenvalues(), f.posterior.eigenvalues());
    let ordered = (0..10).all(|j| ed[j] >= ew[j] && ew[j] >= ef[j]);
    c.check(format!("(a) λ_1 {:.3e} >= {:.3e} >= {:.3e}, leading 10 ordered", ed[0], ew[0], ef[0]), ordered);

    for qoi in [QoiKind::RelErrTv, QoiKind::Ccc] {
        let prior_sd = report.summary("prior", None, qoi).unwrap().std;
        for r in [d, w, f] {
            let sd = report.summary("posterior", Some(r.cadence), qoi).unwrap().std;
            c.check(
                format!("(b) {} {}: posterior var {:.3e} < prior {:.3e}", r.cadence.name(), qoi.name(), sd * sd, prior_sd * prior_sd),
                sd < prior_sd,
            );
        }
    }
    let med = |cad| report.summary("posterior", Some(cad), QoiKind::Ccc).unwrap().median;
    let (md, mw, mf) = (med(Cadence::Daily), med(Cadence::Weekly), med(Cadence::Fortnightly));
    c.check(format!("(c) median CCC {md:.4} >= {mw:.4} >= {mf:.4}"), md >= mw && mw >= mf);
    for t in &report.tests {
        c.note(format!(
            "{} {} vs {}: MW p={:.3e}, Levene p={:.3e}",
            t.qoi.name(),
            t.first,
            t.second,
            t.mann_whitney.p_value,
            t.levene.p_value
        ));
    }
}

fn c8_map_solver(c: &mut Criterion) {
    let t = twin(TwinSpec { cells: 8, ..TwinSpec::default() });
    let prior_only = t.problem.with_observations(ObservationSet::empty(2)).unwrap();
    let res = compute_map(&prior_only, &t.truth, &NewtonOptions::default()).unwrap();
    c.check(format!("prior-only quadratic: {} Newton step(s)", res.iterations), res.converged && res.iterations == 1);

    let t = twin(TwinSpec::default());
    let m_pr = t.problem.prior().mean();
    let res = compute_map(&t.problem, &m_pr, &NewtonOptions::default()).unwrap();
    let (before, after) = (t.problem.misfit_cost(&m_pr).unwrap(), t.problem.misfit_cost(&res.m_map).unwrap());
    c.check(format!("misfit {before:.3e} -> {after:.3e}, reduction {:.1}x >= 10x", before / after), before >= 10.0 * after);

    let mut medians = Vec::new();
    for cells in [20, 40] {
        let t = twin(TwinSpec { cells, ..TwinSpec::default() });
        let res = compute_map(&t.problem, &t.problem.prior().mean(), &NewtonOptions::default()).unwrap();
        c.check(format!("{cells}x{cells} MAP converged"), res.converged);
        let mut cg: Vec<f64> = res.cg_per_newton().into_iter().map(|v| v as f64).collect();
        medians.push(median(&mut cg));
    }
    let ratio = medians[0].max(medians[1]) / medians[0].min(medians[1]);
    c.check(format!("median CG per Newton {} vs {}, ratio {ratio:.2} < 2", medians[0], medians[1]), ratio < 2.0);
}

fn c9_qoi_and_stats(c: &mut Criterion) {
    let unit = |res: usize| FemSpace::new(Arc::new(generate_structured(&[1.0, 1.0], &[res, res], 2).unwrap())).unwrap();
    let s = unit(10);
    let n = s.n_vertices();
    c.check("u ≡ 0.5: ttc 0.5, tv 1", (ttc(&s, &vec![0.5; n], 0.1) - 0.5).abs() < 1e-14 && (tv(&s, &vec![0.5; n], 0.1) - 1.0).abs() < 1e-14);
    c.check("u ≡ 0.05: ttc 0, tv 0", ttc(&s, &vec![0.05; n], 0.1) == 0.0 && tv(&s, &vec![0.05; n], 0.1) == 0.0);
    let half = |s: &FemSpace| -> Vec<f64> { (0..s.n_vertices()).map(|i| if s.mesh().vertex(i)[0] < 0.5 { 0.8 } else { 0.0 }).collect() };
    let fine = unit(256);
    let (ttc_f, tv_f) = (ttc(&fine, &half(&fine), 0.1), tv(&fine, &half(&fine), 0.1));
    let mut half_ok = true;
    for res in [8, 16, 32] {
        let s = unit(res);
        let tol = 2.0 / res as f64;
        let (a, b) = (ttc(&s, &half(&s), 0.1), tv(&s, &half(&s), 0.1));
        half_ok &= (a - ttc_f).abs() <= tol && (b - tv_f).abs() <= tol && (a - 0.4).abs() <= tol && (b - 0.5).abs() <= tol;
    }
    c.check("half domain within 2/resolution of the fine-grid oracle", half_ok);

    c.check("ccc(x, x) = 1", ccc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() == 1.0);
    c.check("ccc reversed = −1", (ccc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
    c.check("ccc of two constants = 0", ccc(&[2.0, 2.0], &[5.0, 5.0]).unwrap() == 0.0);

    let a = [true, true, true, true, false, false, false];
    let b = [true, true, true, false, true, true, true];
    c.check("dice identical = 1", dice(&a, &a).unwrap() == 1.0);
    c.check("dice disjoint = 0", dice(&[true, false], &[false, true]).unwrap() == 0.0);
    c.check("dice |A|=4 |B|=6 |A∩B|=3 = 0.6", (dice(&a, &b).unwrap() - 0.6).abs() < 1e-15);

    let mw = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
    c.check("Mann–Whitney U = 0 for separated samples", mw.statistic == 0.0);
    let same = [1.5, 2.5, 2.5, 7.0];
    c.check("Mann–Whitney U = n²/2 for identical samples", mann_whitney_u(&same, &same).unwrap().statistic == 8.0);
    let (x, y) = ([1.2, 3.4, 2.2, 5.1, 0.3, 2.2, 4.4], [2.5, 6.1, 3.3, 2.2, 7.7, 5.0]);
    c.check(
        "Mann–Whitney p symmetric",
        mann_whitney_u(&x, &y).unwrap().p_value == mann_whitney_u(&y, &x).unwrap().p_value,
    );

    let l = levene(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    c.check("Levene a = b: W 0, p 1", l.statistic == 0.0 && l.p_value == 1.0);
    let l = levene(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]).unwrap();
    c.check(format!("Levene scaled: W {:.12} vs 9.623762376238", l.statistic), (l.statistic - 9.623762376237623).abs() < 1e-12);
    let y_shift: Vec<f64> = y.iter().map(|v| v + 100.0).collect();
    c.check(
        "Levene invariant under a shift",
        (levene(&x, &y).unwrap().statistic - levene(&x, &y_shift).unwrap().statistic).abs() < 1e-9,
    );

    let s = summarize(&[4.0; 9]).unwrap();
    c.check("summarize constant: std 0, collapsed interval", s.std == 0.0 && s.p5 == 4.0 && s.p95 == 4.0);
    let ints: Vec<f64> = (0..=100).map(f64::from).collect();
    let s = summarize(&ints).unwrap();
    c.check("summarize 0..=100: p5 5, p95 95", s.p5 == 5.0 && s.p95 == 95.0);
    let v = [0.3, 1.7, 2.2, 9.1, 4.4, -3.0];
    let mean = v.iter().sum::<f64>() / 6.0;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0).sqrt();
    let s = summarize(&v).unwrap();
    c.check("summarize matches two-pass mean and std", (s.mean - mean).abs() < 1e-14 && (s.std - sd).abs() < 1e-14);
}

fn files_identical(a: &std::path::Path, b: &std::path::Path) -> (usize, Vec<String>) {
    let mut differing = Vec::new();
    let mut count = 0;
    for entry in std::fs::read_dir(a).unwrap() {
        let name = entry.unwrap().file_name();
        count += 1;
        if std::fs::read(a.join(&name)).ok() != std::fs::read(b.join(&name)).ok() {
            differing.push(name.to_string_lossy().into_owned());
        }
    }
    (count, differing)
}

fn c10_determinism_and_formats(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);

    let mesh = labeled_space(7, 13.0).mesh().clone();
    save_mesh(&mesh, p("m.twmesh")).unwrap();
    let back = load_mesh(p("m.twmesh")).unwrap();
    save_mesh(&back, p("m2.twmesh")).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    c.check(
        "mesh round trip",
        bits(back.coords()) == bits(mesh.coords())
            && back.cells() == mesh.cells()
            && back.labels() == mesh.labels()
            && std::fs::read(p("m.twmesh.bin")).unwrap() == std::fs::read(p("m2.twmesh.bin")).unwrap(),
    );

    let g = ImageGeometry::new(vec![5, 4], vec![0.7, 1.3], vec![-1.0, 2.5]).unwrap();
    let mut r = rng(3);
    let mut data: Vec<f32> = (0..20).map(|_| r.random::<f32>()).collect();
    data[3] = f32::NAN;
    data[7] = f32::MIN_POSITIVE / 2.0;
    let img = VoxelImage::new(g, data).unwrap();
    img.save(p("i.twimg")).unwrap();
    let back = VoxelImage::load(p("i.twimg")).unwrap();
    let fbits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    c.check("image round trip incl. NaN and subnormals", back.geometry == img.geometry && fbits(&back.data) == fbits(&img.data));

    let manifest = ObservationManifest {
        noise_variance: 1.0 / 3.0,
        observations: vec![ManifestEntry { t_days: 0.0, image: "i.twimg".into() }, ManifestEntry { t_days: 7.5, image: "j.twimg".into() }],
    };
    manifest.save(p("manifest.json")).unwrap();
    c.check("manifest round trip", ObservationManifest::load(p("manifest.json")).unwrap() == manifest);

    let sched = TherapySchedule { rt_events: vec![(1.0, 1.8), (2.0, 2.2)], ct_doses: vec![(0.1, 0.7)], alpha_ct: 0.82, ..TherapySchedule::stupp(3.0) };
    c.check("schedule CSV round trip", sched.with_events_from_csv(&sched.to_csv()).unwrap() == sched);

    let records = (0..5)
        .map(|i| SampleRecord {
            index: i,
            seed: 40 + i as u64,
            value: if i == 2 { None } else { Some((i as f64 + 0.1).sqrt() / 3.0) },
            status: if i == 2 { "failed: test".into() } else { "ok".into() },
        })
        .collect();
    let pf = PushforwardResult { source: "posterior".into(), qoi: QoiKind::Ccc, records };
    let mut buf = Vec::new();
    pf.write_csv(&mut buf).unwrap();
    let back = PushforwardResult::read_csv(std::str::from_utf8(&buf).unwrap(), "posterior", QoiKind::Ccc).unwrap();
    c.check("pushforward CSV round trip", back == pf);

    let eig = vec![1.0 / 3.0, 2.0f64.sqrt(), 1e-300, 6.02214076e23];
    let back: Vec<f64> = serde_json::from_str(&serde_json::to_string(&eig).unwrap()).unwrap();
    c.check("eigenvalue JSON round trip", bits(&back) == bits(&eig));
    let cfg = ScenarioConfig { dt_days: 1.0 / 3.0 * 3.0, noise_percent: 2.0 / 3.0, ..ScenarioConfig::default() };
    let back: ScenarioConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
    c.check("scenario config JSON round trip", back == cfg);

    let tiny = ScenarioConfig {
        extent_mm: 40.0,
        coarse_cells: 8,
        fine_cells: 16,
        voxels: 10,
        imaging_end_day: 28.0,
        prediction_day: 42.0,
        seed_center_mm: vec![20.0, 20.0],
        enhancing_radius_mm: 4.0,
        non_enhancing_radius_mm: 7.0,
        therapy: TherapySchedule::stupp(7.0),
        n_samples: 24,
        laplace: LaplaceOptions { rank: 8, oversample: 4, seed: 1 },
        ..ScenarioConfig::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_frequency_study(&tiny, Some(a.path())).unwrap();
    run_frequency_study(&tiny, Some(b.path())).unwrap();
    let (count, differing) = files_identical(a.path(), b.path());
    c.check(format!("two study runs: {count} files, differing {differing:?}"), count > 10 && differing.is_empty());

    let patient = study::synthesize(&tiny).unwrap();
    let again = study::synthesize(&tiny).unwrap();
    c.check("synthesis repeatable", bits(&patient.truth_fine) == bits(&again.truth_fine) && patient.images.iter().zip(&again.images).all(|(x, y)| fbits(&x.1.data) == fbits(&y.1.data)));
}

type Body = fn(&mut Criterion);

fn main() {
    let criteria: [(usize, &str, Body, f64); 10] = [
        (1, "adjoint gradient vs central differences", c1_adjoint_gradient, 60.0),
        (2, "Hessian symmetry, FD and zero-residual checks", c2_hessian, 120.0),
        (3, "dense Laplace oracle", c3_dense_laplace, 120.0),
        (4, "posterior sampling consistency", c4_posterior_sampling, f64::INFINITY),
        (5, "prior statistics and Robin boundary", c5_prior_statistics, f64::INFINITY),
        (6, "forward solver oracles", c6_forward, f64::INFINITY),
        (7, "imaging-frequency study", c7_frequency_study, 45.0 * 60.0),
        (8, "MAP solver behavior", c8_map_solver, f64::INFINITY),
        (9, "QoI and statistics units", c9_qoi_and_stats, 10.0),
        (10, "determinism and file formats", c10_determinism_and_formats, f64::INFINITY),
    ];
    let filters: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let listing = std::env::args().any(|a| a == "--list");
    if listing {
        for (id, name, _, _) in &criteria {
            println!("criterion {id}: {name}: test");
        }
        return;
    }

    let mut failed = Vec::new();
    for (id, name, body, budget_s) in criteria {
        if !filters.is_empty() && !filters.contains(&id) {
            continue;
        }
        let mut c = Criterion::new();
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| body(&mut c)));
        let elapsed = start.elapsed();
        if let Err(panic) = outcome {
            let msg = panic.downcast_ref::<String>().cloned().or(panic.downcast_ref::<&str>().map(|s| s.to_string()));
            c.check(format!("panicked: {}", msg.unwrap_or_default()), false);
        }
        if budget_s.is_finite() {
            c.check(format!("runtime under {budget_s} s"), elapsed < Duration::from_secs_f64(budget_s));
        }
        let ok = c.checks.iter().all(|(_, pass)| *pass);
        println!("{} criterion {id}: {name} ({:.1} s)", if ok { "PASS" } else { "FAIL" }, elapsed.as_secs_f64());
        for (label, pass) in &c.checks {
            println!("    [{}] {label}", if *pass { "ok" } else { "x" });
        }
        for note in &c.notes {
            println!("    note: {note}");
        }
        if !ok {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: criteria {failed:?} failed");
        std::process::exit(1);
    }
}
