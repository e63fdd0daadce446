use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tumortwin::dataio::{field_to_voxel, observations_from_images, suppress_background, voxel_to_field, ImageGeometry, ManifestEntry, ObservationManifest, VoxelImage};
use tumortwin::fem::FemSpace;
use tumortwin::forward::{TherapySchedule, TimeGrid};
use tumortwin::inverse::{InverseProblem, ParameterLayout};
use tumortwin::laplace::LowRankPosterior;
use tumortwin::map_solver::compute_map;
use tumortwin::mesh::{assign_labels, generate_structured, load_mesh, save_mesh, Tissue};
use tumortwin::prior::{BlockPrior, LayoutKind};
use tumortwin::qoi::{pushforward, ttc, tv, Predictor, PushforwardResult, Qoi, QoiReference, QoiSpec, Sampler};
use tumortwin::study::{self, summarize, Summary, BACKGROUND_SIGMAS};

use crate::config::RunConfig;
use crate::CliError;

/// Files written by a subcommand, relative to the output directory.
pub type Artifacts = Vec<String>;

struct Out<'a> {
    dir: &'a Path,
    written: Artifacts,
}

impl<'a> Out<'a> {
    fn new(dir: &'a Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("creating {}: {e}", dir.display())))?;
        Ok(Out { dir, written: Vec::new() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.dir.join(name)
    }

    fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let path = self.path(name);
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        fs::write(&path, text).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
    }

    fn text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
    }

    fn image(&mut self, name: &str, img: &VoxelImage) -> Result<(), CliError> {
        let path = self.path(name);
        img.save(&path).map_err(|e| CliError::from_core("writing image", e))
    }

    fn file(&mut self, name: &str) -> Result<BufWriter<fs::File>, CliError> {
        let path = self.path(name);
        let f = fs::File::create(&path).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))?;
        Ok(BufWriter::new(f))
    }
}

fn core<T>(stage: &str, r: tumortwin::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::from_core(stage, e))
}

fn build_space(cfg: &RunConfig) -> Result<Arc<FemSpace>, CliError> {
    let m = RunConfig::require(&cfg.mesh, "mesh")?;
    let mesh = match &m.path {
        Some(p) => core("loading mesh", load_mesh(p))?,
        None => {
            let extent = m.extent_mm.as_deref().unwrap_or_default();
            let cells = m.cells.as_deref().unwrap_or_default();
            let mesh = core("mesh generation", generate_structured(extent, cells, extent.len()))?;
            let split = m.gray_below_x_mm.unwrap_or(0.5 * extent[0]);
            assign_labels(&mesh, |x| if x[0] < split { Tissue::Gray } else { Tissue::White })
        }
    };
    Ok(Arc::new(core("finite element setup", FemSpace::new(Arc::new(mesh)))?))
}

fn therapy(cfg: &RunConfig) -> Result<TherapySchedule, CliError> {
    match &cfg.therapy {
        Some(t) => t.build(),
        None => Ok(TherapySchedule::untreated()),
    }
}

fn load_image(field: &str, path: &Path) -> Result<VoxelImage, CliError> {
    VoxelImage::load(path).map_err(|e| CliError::Config(format!("{field}: {}: {e}", path.display())))
}

/// Everything derived from the data: images, noise level and default states.
struct DataSet {
    images: Vec<(f64, VoxelImage)>,
    noise_variance: f64,
    initial: Option<VoxelImage>,
    reference: Option<(VoxelImage, f64, f64)>,
}

impl DataSet {
    fn geometry(&self) -> Option<&ImageGeometry> {
        self.images.first().map(|(_, img)| &img.geometry).or(self.initial.as_ref().map(|i| &i.geometry))
    }

    fn image_at(&self, t: f64) -> Option<&VoxelImage> {
        self.images.iter().find(|(s, _)| (s - t).abs() < 1e-9).map(|(_, img)| img)
    }
}

fn load_data(cfg: &RunConfig) -> Result<DataSet, CliError> {
    let o = RunConfig::require(&cfg.observations, "observations")?;
    let mut data = if let Some(path) = &o.manifest {
        let manifest = ObservationManifest::load(path)
            .map_err(|e| CliError::Config(format!("observations.manifest: {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let images = manifest
            .load_images(base)
            .map_err(|e| CliError::Config(format!("observations.manifest: {e}")))?;
        DataSet { images, noise_variance: manifest.noise_variance, initial: None, reference: None }
    } else {
        let scenario = o.synthesis.as_ref().expect("validated");
        let patient = core("synthesis", study::synthesize(scenario))?;
        let t = patient.target;
        DataSet {
            images: patient.images,
            noise_variance: patient.noise_variance,
            initial: Some(patient.seed_image),
            reference: Some((t.image, t.ttc, t.tv)),
        }
    };
    if let Some(v) = o.noise_variance {
        data.noise_variance = v;
    }
    if let Some(p) = &o.initial_condition {
        data.initial = Some(load_image("observations.initial_condition", p)?);
    }
    Ok(data)
}

struct Setup {
    space: Arc<FemSpace>,
    data: DataSet,
    schedule: TherapySchedule,
    layout_kind: LayoutKind,
    prior: BlockPrior,
}

fn setup(cfg: &RunConfig) -> Result<Setup, CliError> {
    let space = build_space(cfg)?;
    let prior_cfg = RunConfig::require(&cfg.prior, "prior")?.resolve()?;
    let prior = core("prior assembly", prior_cfg.build(&space))?;
    Ok(Setup { data: load_data(cfg)?, schedule: therapy(cfg)?, layout_kind: prior_cfg.layout, prior, space })
}

fn inverse_problem(cfg: &RunConfig, s: &Setup) -> Result<InverseProblem, CliError> {
    let time = RunConfig::require(&cfg.time, "time")?;
    let o = cfg.observations.as_ref().expect("checked by setup");
    let on_cadence = |t: f64| match o.cadence {
        Some(c) => ((t - time.t0) / c.days() as f64).fract().abs() < 1e-9,
        None => true,
    };
    let selected: Vec<(f64, VoxelImage)> = s
        .data
        .images
        .iter()
        .filter(|(t, _)| *t >= time.t0 - 1e-9 && *t <= time.tf + 1e-9 && on_cadence(*t))
        .cloned()
        .collect();
    if selected.is_empty() {
        return Err(CliError::Config("observations: no observation falls inside [time.t0, time.tf]".into()));
    }
    let obs = core("observation setup", observations_from_images(&selected, &s.space, s.data.noise_variance))?;
    let initial = match &s.data.initial {
        Some(img) => img,
        None => s.data.image_at(time.t0).ok_or_else(|| {
            CliError::Config("observations.initial_condition: required when no observation sits at time.t0".into())
        })?,
    };
    let u0 = core("initial condition", voxel_to_field(initial, &s.space, true))?;
    let grid = core("time grid", TimeGrid::new(time.t0, time.tf, time.dt))?;
    let layout = ParameterLayout::for_space(s.layout_kind, &s.space);
    core("problem setup", InverseProblem::new(s.space.clone(), grid, s.schedule.clone(), obs, u0, layout, s.prior.clone()))
}

/// The MAP point as stored between subcommands.
#[derive(Debug, Serialize, Deserialize)]
struct MapFile {
    layout: LayoutKind,
    block_names: Vec<String>,
    n_vertices: usize,
    converged: bool,
    reason: String,
    iterations: usize,
    total_cg_iterations: usize,
    initial_grad_norm: f64,
    grad_norm: f64,
    m_map: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PosteriorFile {
    m_map: Vec<f64>,
    eigenvalues: Vec<f64>,
    eigenvectors: Vec<Vec<f64>>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, hint: &str) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e} (run `{hint}` first)", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn read_map(cfg: &RunConfig, s: &Setup) -> Result<MapFile, CliError> {
    let map: MapFile = read_json(&cfg.output_dir.join("map.json"), "calibrate")?;
    if map.m_map.len() != s.prior.dim() || map.n_vertices != s.space.n_vertices() || map.layout != s.layout_kind {
        return Err(CliError::Config("map.json does not match the configured mesh and prior".into()));
    }
    Ok(map)
}

fn write_block_images(out: &mut Out, prefix: &str, s: &Setup, values: &[f64]) -> Result<(), CliError> {
    let Some(g) = s.data.geometry() else { return Ok(()) };
    let n = s.space.n_vertices();
    for (k, (name, _)) in s.prior.blocks().iter().enumerate() {
        let img = core("resampling", field_to_voxel(&values[k * n..(k + 1) * n], &s.space, g))?;
        out.image(&format!("{prefix}_{name}.twimg"), &img)?;
    }
    Ok(())
}

pub fn mesh_gen(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let space = build_space(cfg)?;
    let mesh = space.mesh();
    let mut out = Out::new(&cfg.output_dir)?;
    let path = out.path("mesh.twmesh");
    core("writing mesh", save_mesh(mesh, &path))?;
    out.written.push("mesh.twmesh.bin".into());
    let (lo, hi) = mesh.bounding_box();
    let gray = mesh.labels().iter().filter(|t| **t == Tissue::Gray).count();
    out.json(
        "mesh_summary.json",
        &serde_json::json!({
            "dim": mesh.dim(),
            "n_vertices": mesh.n_vertices(),
            "n_cells": mesh.n_cells(),
            "n_boundary_facets": mesh.n_boundary_facets(),
            "gray_vertices": gray,
            "bounding_box": [lo, hi],
            "volume": space.volumes().iter().sum::<f64>(),
        }),
    )?;
    Ok(out.written)
}

pub fn synthesize(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let scenario = RunConfig::require(&cfg.scenario, "scenario")?;
    let patient = core("synthesis", study::synthesize(scenario))?;
    let mut out = Out::new(&cfg.output_dir)?;
    fs::create_dir_all(cfg.output_dir.join("images")).map_err(|e| CliError::Io(e.to_string()))?;
    let mut entries = Vec::new();
    for (t, img) in &patient.images {
        let name = format!("images/day_{:03}.twimg", t.round() as i64);
        out.image(&name, img)?;
        entries.push(ManifestEntry { t_days: *t, image: name });
    }
    let manifest = ObservationManifest { noise_variance: patient.noise_variance, observations: entries };
    out.json("manifest.json", &manifest)?;
    out.image("seed.twimg", &patient.seed_image)?;
    out.image("target.twimg", &patient.target.image)?;
    out.json(
        "target.json",
        &serde_json::json!({
            "day": patient.target.day,
            "ttc": patient.target.ttc,
            "tv": patient.target.tv,
            "threshold": scenario.threshold,
        }),
    )?;
    out.text("schedule.csv", &scenario.therapy.to_csv())?;
    let n = patient.fine.n_vertices();
    let g = core("image geometry", scenario.image_geometry())?;
    for (k, name) in ["m_D", "m_kappa"].iter().enumerate() {
        let img = core("resampling", field_to_voxel(&patient.truth_fine[k * n..(k + 1) * n], &patient.fine, &g))?;
        out.image(&format!("truth_{name}.twimg"), &img)?;
    }
    Ok(out.written)
}

pub fn calibrate(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let s = setup(cfg)?;
    let problem = inverse_problem(cfg, &s)?;
    let result = core("MAP estimation", compute_map(&problem, &s.prior.mean(), &cfg.solver))?;
    if result.converged {
        log::info!("MAP converged in {} Newton iterations", result.iterations);
    } else {
        log::warn!("MAP stopped without converging: {}", result.reason);
    }
    let mut out = Out::new(&cfg.output_dir)?;
    let map = MapFile {
        layout: s.layout_kind,
        block_names: s.prior.blocks().iter().map(|(n, _)| n.clone()).collect(),
        n_vertices: s.space.n_vertices(),
        converged: result.converged,
        reason: format!("{:?}", result.reason),
        iterations: result.iterations,
        total_cg_iterations: result.total_cg_iterations,
        initial_grad_norm: result.initial_grad_norm,
        grad_norm: result.grad_norm,
        m_map: result.m_map.clone(),
    };
    out.json("map.json", &map)?;
    core("writing log", result.write_log_csv(out.file("newton_log.csv")?))?;
    write_block_images(&mut out, "map_field", &s, &result.m_map)?;
    Ok(out.written)
}

pub fn laplace(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let s = setup(cfg)?;
    let problem = inverse_problem(cfg, &s)?;
    let map = read_map(cfg, &s)?;
    let post = core("Laplace approximation", LowRankPosterior::build(&problem, &map.m_map, &cfg.laplace))?;
    let mut out = Out::new(&cfg.output_dir)?;
    out.json("eigenvalues.json", post.eigenvalues())?;
    out.json(
        "posterior.json",
        &PosteriorFile {
            m_map: map.m_map,
            eigenvalues: post.eigenvalues().to_vec(),
            eigenvectors: post.eigenvectors().to_vec(),
        },
    )?;
    write_block_images(&mut out, "prior_variance", &s, &s.prior.pointwise_variance())?;
    write_block_images(&mut out, "posterior_variance", &s, &post.pointwise_variance())?;
    Ok(out.written)
}

fn predictor(cfg: &RunConfig, s: &Setup) -> Result<Predictor, CliError> {
    let time = RunConfig::require(&cfg.time, "time")?;
    let tp = time.prediction_tf()?;
    let start = match &time.prediction_initial {
        Some(p) => load_image("time.prediction_initial", p)?,
        None => s.data.image_at(time.tf).cloned().ok_or_else(|| {
            CliError::Config("time.prediction_initial: required when no observation sits at time.tf".into())
        })?,
    };
    let [low, high] = time.prediction_background.unwrap_or_else(|| {
        let sigma = s.data.noise_variance.sqrt();
        [BACKGROUND_SIGMAS.0 * sigma, BACKGROUND_SIGMAS.1 * sigma]
    });
    let start = core("prediction initial state", suppress_background(&start, low, high))?;
    let u = core("prediction initial state", voxel_to_field(&start, &s.space, true))?;
    let layout = ParameterLayout::for_space(s.layout_kind, &s.space);
    core("prediction setup", Predictor::new(s.space.clone(), layout, s.schedule.clone(), u, (time.tf, tp, time.dt)))
}

fn threshold(cfg: &RunConfig) -> f64 {
    cfg.qoi.as_ref().map_or(0.1, |q| q.threshold)
}

pub fn predict(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let s = setup(cfg)?;
    let map = read_map(cfg, &s)?;
    let pred = predictor(cfg, &s)?;
    let u = core("forecast", pred.predict(&map.m_map))?;
    let th = threshold(cfg);
    let mut out = Out::new(&cfg.output_dir)?;
    let (t0, tf, _) = pred.window();
    out.json(
        "prediction.json",
        &serde_json::json!({
            "t_start": t0,
            "t_end": tf,
            "threshold": th,
            "ttc": ttc(&s.space, &u, th),
            "tv": tv(&s.space, &u, th),
        }),
    )?;
    let mesh = s.space.mesh();
    let d = mesh.dim();
    let mut csv = String::from(if d == 2 { "x,y,u\n" } else { "x,y,z,u\n" });
    for (i, v) in u.iter().enumerate() {
        for x in mesh.vertex(i) {
            csv.push_str(&format!("{x:.17e},"));
        }
        csv.push_str(&format!("{v:.17e}\n"));
    }
    out.text("prediction_nodes.csv", &csv)?;
    if let Some(g) = s.data.geometry() {
        out.image("prediction.twimg", &core("resampling", field_to_voxel(&u, &s.space, g))?)?;
    }
    Ok(out.written)
}

fn qoi_reference(cfg: &RunConfig, s: &Setup) -> Result<Option<QoiReference>, CliError> {
    let q = RunConfig::require(&cfg.qoi, "qoi")?;
    let (image, ttc_ref, tv_ref) = match (&q.reference_image, &s.data.reference) {
        (Some(p), _) => (load_image("qoi.reference_image", p)?, None, None),
        (None, Some((img, a, b))) => (img.clone(), Some(*a), Some(*b)),
        (None, None) => return Ok(None),
    };
    let field = core("reference projection", voxel_to_field(&image, &s.space, true))?;
    let g = &image.geometry;
    let centers = g.centers();
    let inside = s.space.contains_points(&centers);
    let d = g.dim();
    let keep: Vec<usize> = (0..g.n_voxels()).filter(|&i| inside[i] && image.value(i).is_finite()).collect();
    Ok(Some(QoiReference {
        ttc: q.reference_ttc.or(ttc_ref).unwrap_or_else(|| ttc(&s.space, &field, q.threshold)),
        tv: q.reference_tv.or(tv_ref).unwrap_or_else(|| tv(&s.space, &field, q.threshold)),
        dim: d,
        points: keep.iter().flat_map(|&i| centers[i * d..(i + 1) * d].to_vec()).collect(),
        values: keep.iter().map(|&i| image.value(i)).collect(),
    }))
}

#[derive(Serialize)]
struct QoiSummaryRow {
    source: String,
    qoi: String,
    n_failed: usize,
    summary: Summary,
}

pub fn qoi(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let q = RunConfig::require(&cfg.qoi, "qoi")?;
    let s = setup(cfg)?;
    let pred = predictor(cfg, &s)?;
    let reference = qoi_reference(cfg, &s)?;
    let qois = q
        .kinds
        .iter()
        .map(|k| Qoi::new(QoiSpec { kind: *k, threshold: q.threshold }, s.space.clone(), reference.clone()))
        .collect::<tumortwin::Result<Vec<_>>>()
        .map_err(|e| CliError::Config(format!("qoi.kinds: {e}")))?;

    let mut results: Vec<PushforwardResult> =
        core("prior pushforward", pushforward(Sampler::Prior(&s.prior), &pred, &qois, q.n_samples, cfg.seeds.sample))?;
    let posterior_path = cfg.output_dir.join("posterior.json");
    if posterior_path.is_file() {
        let pf: PosteriorFile = read_json(&posterior_path, "laplace")?;
        let post = LowRankPosterior::from_parts(pf.m_map, pf.eigenvalues, pf.eigenvectors, s.prior.clone())
            .map_err(|e| CliError::Config(format!("{}: {e}", posterior_path.display())))?;
        results.extend(core(
            "posterior pushforward",
            pushforward(Sampler::Posterior(&post), &pred, &qois, q.n_samples, cfg.seeds.sample),
        )?);
    } else {
        log::warn!("no posterior.json in the output directory; pushing forward the prior only");
    }

    let mut out = Out::new(&cfg.output_dir)?;
    let mut rows = Vec::new();
    for r in &results {
        let name = format!("pushforward_{}_{}.csv", r.source, r.qoi.name());
        core("writing samples", r.write_csv(out.file(&name)?))?;
        let summary = core("summary statistics", summarize(&r.values()))?;
        rows.push(QoiSummaryRow { source: r.source.clone(), qoi: r.qoi.name().into(), n_failed: r.n_failed(), summary });
    }
    out.json("qoi_summary.json", &rows)?;
    Ok(out.written)
}

pub fn study(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let scenario = RunConfig::require(&cfg.scenario, "scenario")?;
    let out = Out::new(&cfg.output_dir)?;
    core("frequency study", study::run_frequency_study(scenario, Some(out.dir)))?;
    let mut files: Vec<String> = fs::read_dir(out.dir)
        .map_err(|e| CliError::Io(e.to_string()))?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n != "run.json")
        .collect();
    files.sort();
    Ok(files)
}
