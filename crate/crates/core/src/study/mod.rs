//! Virtual-patient experiments: synthetic data, calibration at several
//! imaging cadences, forecasting, and the statistics that compare them.
//!
//! Data come from a fine mesh with tissue-dependent diffusivity; inversion
//! runs on a coarser mesh with a single nodal diffusivity field, so the
//! model used for calibration never matches the one that made the data.

pub mod stats;

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataio::{field_to_voxel, observations_from_images, suppress_background, voxel_to_field, ImageGeometry, VoxelImage};
use crate::error::{Error, Result};
use crate::fem::FemSpace;
use crate::forward::{add_noise, observe, ForwardSolver, ObservationSet, TherapySchedule, TimeGrid};
use crate::inverse::{InverseProblem, ParameterLayout};
use crate::laplace::{LaplaceOptions, LowRankPosterior};
use crate::map_solver::{compute_map, MapResult, NewtonOptions};
use crate::mesh::{assign_labels, generate_structured, Tissue};
use crate::prior::{gray_indicator, PriorConfig};
use crate::qoi::{pushforward, tv, ttc, Predictor, PushforwardResult, Qoi, QoiKind, QoiReference, QoiSpec, Sampler};

pub use stats::{levene, mann_whitney_u, percentile, summarize, Summary, TestResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cadence {
    Daily,
    Weekly,
    Fortnightly,
}

impl Cadence {
    pub fn days(self) -> usize {
        match self {
            Cadence::Daily => 1,
            Cadence::Weekly => 7,
            Cadence::Fortnightly => 14,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Cadence::Daily => "daily",
            Cadence::Weekly => "weekly",
            Cadence::Fortnightly => "fortnightly",
        }
    }
}

/// Everything that defines one virtual-patient study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Side length of the square domain; gray matter occupies `x < extent/2`.
    pub extent_mm: f64,
    pub coarse_cells: usize,
    pub fine_cells: usize,
    /// Voxels per axis of the imaging grid.
    pub voxels: usize,
    pub dt_days: f64,
    pub imaging_end_day: f64,
    pub prediction_day: f64,
    pub d_gray: f64,
    pub d_white: f64,
    pub kappa: f64,
    pub seed_center_mm: Vec<f64>,
    pub enhancing_radius_mm: f64,
    pub non_enhancing_radius_mm: f64,
    pub noise_percent: f64,
    /// Defaults to the Stupp protocol starting on day 14.
    pub therapy: TherapySchedule,
    pub prior: PriorConfig,
    pub cadences: Vec<Cadence>,
    pub n_samples: usize,
    pub laplace: LaplaceOptions,
    pub newton: NewtonOptions,
    pub threshold: f64,
    pub noise_seed: u64,
    pub sample_seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            extent_mm: 100.0,
            coarse_cells: 40,
            fine_cells: 80,
            voxels: 50,
            dt_days: 1.0,
            imaging_end_day: 84.0,
            prediction_day: 112.0,
            d_gray: 0.03,
            d_white: 0.3,
            kappa: 0.15,
            seed_center_mm: vec![50.0, 50.0],
            enhancing_radius_mm: 8.0,
            non_enhancing_radius_mm: 14.0,
            noise_percent: 2.0,
            therapy: TherapySchedule::stupp(14.0),
            prior: PriorConfig::preset("upenn-table2").expect("built-in preset"),
            cadences: vec![Cadence::Daily, Cadence::Weekly, Cadence::Fortnightly],
            n_samples: 500,
            laplace: LaplaceOptions::default(),
            newton: NewtonOptions::default(),
            threshold: 0.1,
            noise_seed: 2024,
            sample_seed: 100_000,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(self.extent_mm > 0.0) || self.coarse_cells == 0 || self.fine_cells == 0 || self.voxels == 0 {
            return bad("domain size and resolutions must be positive".into());
        }
        if self.seed_center_mm.len() != 2 {
            return bad("seed_center_mm must have two coordinates".into());
        }
        for (name, v) in [("d_gray", self.d_gray), ("d_white", self.d_white), ("kappa", self.kappa)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.enhancing_radius_mm >= 0.0 && self.non_enhancing_radius_mm >= self.enhancing_radius_mm) {
            return bad("seed radii must satisfy 0 ≤ enhancing ≤ non-enhancing".into());
        }
        if !(self.noise_percent >= 0.0) {
            return bad("noise_percent must be nonnegative".into());
        }
        if !(self.prediction_day > self.imaging_end_day && self.imaging_end_day > 0.0) {
            return bad("prediction_day must come after imaging_end_day > 0".into());
        }
        TimeGrid::new(0.0, self.prediction_day, self.dt_days)?;
        TimeGrid::new(0.0, self.imaging_end_day, self.dt_days)?;
        for c in &self.cadences {
            let d = c.days() as f64;
            if (self.imaging_end_day / d).fract() != 0.0 {
                return bad(format!("{} cadence does not divide the imaging window", c.name()));
            }
            if (d / self.dt_days).fract().abs() > 1e-12 {
                return bad(format!("{} cadence is not a multiple of dt", c.name()));
            }
        }
        if self.n_samples == 0 || self.cadences.is_empty() {
            return bad("need at least one cadence and one sample".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)".into());
        }
        self.therapy.validate()?;
        self.prior.validate()?;
        self.newton.validate()?;
        Ok(())
    }

    pub fn labeled_space(&self, cells: usize) -> Result<Arc<FemSpace>> {
        let mesh = generate_structured(&[self.extent_mm, self.extent_mm], &[cells, cells], 2)?;
        let half = 0.5 * self.extent_mm;
        let mesh = assign_labels(&mesh, |x| if x[0] < half { Tissue::Gray } else { Tissue::White });
        Ok(Arc::new(FemSpace::new(Arc::new(mesh))?))
    }

    pub fn image_geometry(&self) -> Result<ImageGeometry> {
        ImageGeometry::covering_box(&[self.extent_mm, self.extent_mm], &[self.voxels, self.voxels])
    }

    /// Imaging days for a cadence, starting at day 0.
    pub fn imaging_days(&self, cadence: Cadence) -> Vec<f64> {
        let step = cadence.days();
        (0..=self.imaging_end_day as usize).step_by(step).map(|d| d as f64).collect()
    }
}

/// The withheld forecast target.
#[derive(Debug, Clone)]
pub struct PredictionTarget {
    pub day: f64,
    /// Noisy image at the prediction day.
    pub image: VoxelImage,
    /// TTC and TV of the clean fine-mesh state.
    pub ttc: f64,
    pub tv: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticPatient {
    pub fine: Arc<FemSpace>,
    /// `[m_D, m_kappa]` nodal truth on the fine mesh.
    pub truth_fine: Vec<f64>,
    pub seed_image: VoxelImage,
    /// Daily noisy images over the imaging window.
    pub images: Vec<(f64, VoxelImage)>,
    pub noise_variance: f64,
    pub target: PredictionTarget,
}

fn seed_image(cfg: &ScenarioConfig, geometry: &ImageGeometry) -> Result<VoxelImage> {
    let c = &cfg.seed_center_mm;
    let (r1, r2) = (cfg.enhancing_radius_mm, cfg.non_enhancing_radius_mm);
    VoxelImage::from_fn(geometry.clone(), |x| {
        let r = ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)).sqrt();
        if r <= r1 {
            0.8
        } else if r <= r2 {
            0.16
        } else {
            0.0
        }
    })
}

/// Generates the data of a virtual patient on the fine mesh.
pub fn synthesize(cfg: &ScenarioConfig) -> Result<SyntheticPatient> {
    cfg.validate()?;
    let fine = cfg.labeled_space(cfg.fine_cells)?;
    let geometry = cfg.image_geometry()?;
    let seed = seed_image(cfg, &geometry)?;
    let u0 = voxel_to_field(&seed, &fine, true)?;

    let chi = gray_indicator(&fine);
    let (lg, lw) = (cfg.d_gray.ln(), cfg.d_white.ln());
    let m_d: Vec<f64> = chi.iter().map(|c| c * lg + (1.0 - c) * lw).collect();
    let m_k = vec![cfg.kappa.ln(); fine.n_vertices()];

    let grid = TimeGrid::new(0.0, cfg.prediction_day, cfg.dt_days)?;
    let traj = ForwardSolver::new(&fine, &cfg.therapy, grid)?.solve(&m_d, &m_k, &u0)?;
    let mut times: Vec<f64> = (0..=cfg.imaging_end_day as usize).map(|d| d as f64).collect();
    times.push(cfg.prediction_day);
    let centers = geometry.centers();
    let clean = observe(&traj, &times, &fine.interpolator(&centers)?)?;
    let (noisy, noise_variance) = add_noise(&clean, cfg.noise_percent, cfg.noise_seed)?;
    let to_image = |v: &[f64]| VoxelImage::new(geometry.clone(), v.iter().map(|x| *x as f32).collect());
    let mut images = times.iter().zip(&noisy).map(|(t, v)| Ok((*t, to_image(v)?))).collect::<Result<Vec<_>>>()?;
    let (day, image) = images.pop().expect("target appended above");
    let target_state = traj.final_state();
    let target = PredictionTarget {
        day,
        image,
        ttc: ttc(&fine, target_state, cfg.threshold),
        tv: tv(&fine, target_state, cfg.threshold),
    };
    let noise_variance = if noise_variance > 0.0 { noise_variance } else { 1e-12 };
    Ok(SyntheticPatient {
        fine,
        truth_fine: [m_d, m_k].concat(),
        seed_image: seed,
        images,
        noise_variance,
        target,
    })
}

/// Calibration inputs on the coarse mesh for one cadence. The prediction
/// target is not part of the returned problem.
pub fn calibration_problem(cfg: &ScenarioConfig, patient: &SyntheticPatient, space: &Arc<FemSpace>, cadence: Cadence) -> Result<InverseProblem> {
    let days = cfg.imaging_days(cadence);
    let images: Vec<(f64, VoxelImage)> =
        patient.images.iter().filter(|(t, _)| days.iter().any(|d| d == t)).cloned().collect();
    let obs: ObservationSet = observations_from_images(&images, space, patient.noise_variance)?;
    let u0 = voxel_to_field(&patient.seed_image, space, true)?;
    let layout = ParameterLayout::for_space(cfg.prior.layout, space);
    let prior = cfg.prior.build(space)?;
    let grid = TimeGrid::new(0.0, cfg.imaging_end_day, cfg.dt_days)?;
    InverseProblem::new(space.clone(), grid, cfg.therapy.clone(), obs, u0, layout, prior)
}

/// Hysteresis thresholds, in noise standard deviations, that separate tumor
/// from background in the forecast's starting image.
pub const BACKGROUND_SIGMAS: (f64, f64) = (1.0, 3.0);

/// Forecast from the last image of the imaging window to the prediction day.
/// Background is removed from that image with [`suppress_background`] at
/// [`BACKGROUND_SIGMAS`].
pub fn prediction_setup(cfg: &ScenarioConfig, patient: &SyntheticPatient, space: &Arc<FemSpace>) -> Result<(Predictor, Vec<Qoi>)> {
    let last = &patient.images.last().ok_or_else(|| Error::invalid("no images"))?.1;
    let u_last = {
        let sigma = patient.noise_variance.sqrt();
        let (low, high) = BACKGROUND_SIGMAS;
        voxel_to_field(&suppress_background(last, low * sigma, high * sigma)?, space, true)?
    };
    let layout = ParameterLayout::for_space(cfg.prior.layout, space);
    let predictor = Predictor::new(
        space.clone(),
        layout,
        cfg.therapy.clone(),
        u_last,
        (cfg.imaging_end_day, cfg.prediction_day, cfg.dt_days),
    )?;
    let g = &patient.target.image.geometry;
    let centers = g.centers();
    let inside = space.contains_points(&centers);
    let keep: Vec<usize> = (0..g.n_voxels()).filter(|&i| inside[i]).collect();
    let reference = QoiReference {
        ttc: patient.target.ttc,
        tv: patient.target.tv,
        dim: 2,
        points: keep.iter().flat_map(|&i| centers[2 * i..2 * i + 2].to_vec()).collect(),
        values: keep.iter().map(|&i| patient.target.image.value(i)).collect(),
    };
    let qois = [QoiKind::RelErrTv, QoiKind::Ccc]
        .into_iter()
        .map(|k| Qoi::new(QoiSpec { kind: k, threshold: cfg.threshold }, space.clone(), Some(reference.clone())))
        .collect::<Result<Vec<_>>>()?;
    Ok((predictor, qois))
}

#[derive(Debug, Clone)]
pub struct CadenceResult {
    pub cadence: Cadence,
    pub n_observation_times: usize,
    pub map: MapResult,
    pub posterior: LowRankPosterior,
    /// One entry per QoI, in the order relative TV error, CCC.
    pub pushforward: Vec<PushforwardResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QoiSummary {
    pub source: String,
    pub cadence: Option<Cadence>,
    pub qoi: QoiKind,
    pub summary: Summary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonTest {
    pub qoi: QoiKind,
    pub first: String,
    pub second: String,
    pub mann_whitney: TestResult,
    pub levene: TestResult,
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub prior_pushforward: Vec<PushforwardResult>,
    pub cadences: Vec<CadenceResult>,
    pub summaries: Vec<QoiSummary>,
    pub tests: Vec<ComparisonTest>,
}

impl StudyReport {
    pub fn cadence(&self, c: Cadence) -> Option<&CadenceResult> {
        self.cadences.iter().find(|r| r.cadence == c)
    }

    pub fn summary(&self, source: &str, cadence: Option<Cadence>, qoi: QoiKind) -> Option<&Summary> {
        self.summaries
            .iter()
            .find(|s| s.source == source && s.cadence == cadence && s.qoi == qoi)
            .map(|s| &s.summary)
    }
}

fn label(source: &str, cadence: Option<Cadence>) -> String {
    match cadence {
        Some(c) => format!("{source}_{}", c.name()),
        None => source.to_string(),
    }
}

/// Runs the imaging-frequency comparison. When `out_dir` is given the
/// report files are written there.
pub fn run_frequency_study(cfg: &ScenarioConfig, out_dir: Option<&Path>) -> Result<StudyReport> {
    cfg.validate()?;
    let patient = synthesize(cfg)?;
    let coarse = cfg.labeled_space(cfg.coarse_cells)?;
    let (predictor, qois) = prediction_setup(cfg, &patient, &coarse)?;

    let prior = cfg.prior.build(&coarse)?;
    let prior_pushforward = pushforward(Sampler::Prior(&prior), &predictor, &qois, cfg.n_samples, cfg.sample_seed)?;

    let mut cadences = Vec::new();
    for &cadence in &cfg.cadences {
        let problem = calibration_problem(cfg, &patient, &coarse, cadence)?;
        let m0 = problem.prior().mean();
        let map = compute_map(&problem, &m0, &cfg.newton)?;
        log::info!(
            "{}: MAP after {} Newton / {} CG iterations ({})",
            cadence.name(),
            map.iterations,
            map.total_cg_iterations,
            map.reason
        );
        let posterior = LowRankPosterior::build(&problem, &map.m_map, &cfg.laplace)?;
        let pf = pushforward(Sampler::Posterior(&posterior), &predictor, &qois, cfg.n_samples, cfg.sample_seed)?;
        cadences.push(CadenceResult {
            cadence,
            n_observation_times: problem.observations().n_times(),
            map,
            posterior,
            pushforward: pf,
        });
    }

    let mut summaries = Vec::new();
    let mut tests = Vec::new();
    for (k, q) in qois.iter().enumerate() {
        let kind = q.spec().kind;
        let prior_vals = prior_pushforward[k].values();
        summaries.push(QoiSummary { source: "prior".into(), cadence: None, qoi: kind, summary: summarize(&prior_vals)? });
        for r in &cadences {
            let vals = r.pushforward[k].values();
            summaries.push(QoiSummary {
                source: "posterior".into(),
                cadence: Some(r.cadence),
                qoi: kind,
                summary: summarize(&vals)?,
            });
            tests.push(ComparisonTest {
                qoi: kind,
                first: "prior".into(),
                second: label("posterior", Some(r.cadence)),
                mann_whitney: mann_whitney_u(&prior_vals, &vals)?,
                levene: levene(&prior_vals, &vals)?,
            });
        }
        for i in 0..cadences.len() {
            for j in i + 1..cadences.len() {
                let (a, b) = (cadences[i].pushforward[k].values(), cadences[j].pushforward[k].values());
                tests.push(ComparisonTest {
                    qoi: kind,
                    first: label("posterior", Some(cadences[i].cadence)),
                    second: label("posterior", Some(cadences[j].cadence)),
                    mann_whitney: mann_whitney_u(&a, &b)?,
                    levene: levene(&a, &b)?,
                });
            }
        }
    }

    let report = StudyReport { prior_pushforward, cadences, summaries, tests };
    if let Some(dir) = out_dir {
        write_report(cfg, &coarse, &report, dir)?;
    }
    Ok(report)
}

/// Writes `config.json`, `map_fields_<cadence>_<block>.twimg`,
/// `eigenvalues.json`, `pushforward_<source>_<qoi>.csv`, `summary.json`,
/// `stats_tests.json`, and per-cadence Newton logs.
pub fn write_report(cfg: &ScenarioConfig, space: &Arc<FemSpace>, report: &StudyReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let geometry = cfg.image_geometry()?;
    let n = space.n_vertices();
    let mut eigen = serde_json::Map::new();
    for r in &report.cadences {
        for (b, (name, _)) in r.posterior.prior().blocks().iter().enumerate() {
            let img = field_to_voxel(&r.map.m_map[b * n..(b + 1) * n], space, &geometry)?;
            img.save(dir.join(format!("map_fields_{}_{}.twimg", r.cadence.name(), name)))?;
        }
        eigen.insert(r.cadence.name().into(), serde_json::to_value(r.posterior.eigenvalues())?);
        let mut log = Vec::new();
        r.map.write_log_csv(&mut log)?;
        fs::write(dir.join(format!("newton_{}.csv", r.cadence.name())), log)?;
        for pf in &r.pushforward {
            let mut buf = Vec::new();
            pf.write_csv(&mut buf)?;
            fs::write(dir.join(format!("pushforward_{}_{}.csv", label("posterior", Some(r.cadence)), pf.qoi.name())), buf)?;
        }
    }
    for pf in &report.prior_pushforward {
        let mut buf = Vec::new();
        pf.write_csv(&mut buf)?;
        fs::write(dir.join(format!("pushforward_prior_{}.csv", pf.qoi.name())), buf)?;
    }
    fs::write(dir.join("eigenvalues.json"), serde_json::to_string_pretty(&eigen)?)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&report.summaries)?)?;
    fs::write(dir.join("stats_tests.json"), serde_json::to_string_pretty(&report.tests)?)?;
    Ok(())
}
