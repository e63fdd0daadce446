//! The run configuration: one JSON document per experiment.
//!
//! Relative paths are resolved against the directory holding the config
//! file. Every section is optional at parse time; each subcommand states
//! which sections it needs and [`RunConfig::require`] reports the missing
//! one by name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tumortwin::forward::{ChemoSampling, TherapySchedule};
use tumortwin::laplace::LaplaceOptions;
use tumortwin::map_solver::NewtonOptions;
use tumortwin::prior::{LayoutKind, PriorBlockSpec, PriorConfig};
use tumortwin::qoi::QoiKind;
use tumortwin::study::{Cadence, ScenarioConfig};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub mesh: Option<MeshSection>,
    #[serde(default)]
    pub prior: Option<PriorSection>,
    #[serde(default)]
    pub therapy: Option<TherapySection>,
    #[serde(default)]
    pub time: Option<TimeSection>,
    #[serde(default)]
    pub observations: Option<ObservationsSection>,
    #[serde(default)]
    pub solver: NewtonOptions,
    #[serde(default)]
    pub laplace: LaplaceOptions,
    #[serde(default)]
    pub qoi: Option<QoiSection>,
    #[serde(default)]
    pub seeds: Seeds,
    /// Virtual-patient scenario for `synthesize` and `study`.
    #[serde(default)]
    pub scenario: Option<ScenarioConfig>,
}

/// Either an existing mesh file or a structured box.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSection {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub extent_mm: Option<Vec<f64>>,
    #[serde(default)]
    pub cells: Option<Vec<usize>>,
    /// Vertices with `x` below this are gray matter; defaults to half the extent.
    #[serde(default)]
    pub gray_below_x_mm: Option<f64>,
}

/// A named preset or an explicit layout with one block per parameter field.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub layout: Option<LayoutKind>,
    #[serde(default)]
    pub blocks: Option<Vec<PriorBlockSpec>>,
}

/// Pharmacodynamic constants plus the event schedule. Omitted constants
/// take the library defaults; events come from `schedule` (CSV) or from a
/// standard chemoradiation course starting at `stupp_start_day`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TherapySection {
    #[serde(default)]
    pub schedule: Option<PathBuf>,
    #[serde(default)]
    pub stupp_start_day: Option<f64>,
    #[serde(default)]
    pub alpha_rt: Option<f64>,
    #[serde(default)]
    pub beta_rt: Option<f64>,
    #[serde(default)]
    pub alpha_ct: Option<f64>,
    #[serde(default)]
    pub beta_ct_rate: Option<f64>,
    #[serde(default)]
    pub rt_gamma: Option<f64>,
    #[serde(default)]
    pub chemo_sampling: Option<ChemoSampling>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    #[serde(default)]
    pub t0: f64,
    /// End of the calibration window.
    pub tf: f64,
    pub dt: f64,
    /// End of the forecast, which starts at `tf`.
    #[serde(default)]
    pub prediction_tf: Option<f64>,
    /// State at `tf` for the forecast; defaults to the observation at `tf`.
    #[serde(default)]
    pub prediction_initial: Option<PathBuf>,
    /// Hysteresis thresholds `[low, high]` separating tumor from background
    /// in the forecast's starting image; defaults to one and three noise
    /// standard deviations. `[0, 0]` keeps every positive voxel.
    #[serde(default)]
    pub prediction_background: Option<[f64; 2]>,
}

/// Calibration data: a manifest of images, or a scenario synthesized on the fly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationsSection {
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub synthesis: Option<ScenarioConfig>,
    /// State at `t0`; defaults to the observation at `t0`.
    #[serde(default)]
    pub initial_condition: Option<PathBuf>,
    /// Keep only observations on this cadence.
    #[serde(default)]
    pub cadence: Option<Cadence>,
    /// Overrides the noise variance recorded with the data.
    #[serde(default)]
    pub noise_variance: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QoiSection {
    pub kinds: Vec<QoiKind>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    pub n_samples: usize,
    /// Measured state at `prediction_tf`, needed by comparative QoIs.
    #[serde(default)]
    pub reference_image: Option<PathBuf>,
    /// Reference totals; computed from `reference_image` when omitted.
    #[serde(default)]
    pub reference_ttc: Option<f64>,
    #[serde(default)]
    pub reference_tv: Option<f64>,
}

fn default_threshold() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Base seed of the Monte Carlo pushforward; sample `i` uses `sample + i`.
    pub sample: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { sample: 100_000 }
    }
}

fn config_error(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {msg}"))
}

impl RunConfig {
    /// Parses the file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            CliError::Config(format!("{}: {field}: {}", path.display(), e.inner()))
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(m) = &mut self.mesh {
            m.path.as_mut().map(fix);
        }
        if let Some(t) = &mut self.therapy {
            t.schedule.as_mut().map(fix);
        }
        if let Some(t) = &mut self.time {
            t.prediction_initial.as_mut().map(fix);
        }
        if let Some(o) = &mut self.observations {
            o.manifest.as_mut().map(fix);
            o.initial_condition.as_mut().map(fix);
        }
        if let Some(q) = &mut self.qoi {
            q.reference_image.as_mut().map(fix);
        }
    }

    /// Returns the section or a config error naming it.
    pub fn require<'a, T>(section: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
        section.as_ref().ok_or_else(|| config_error(name, "section is required by this subcommand"))
    }

    /// Checks every present section, including that referenced files exist.
    pub fn validate(&self) -> Result<(), CliError> {
        if let Some(m) = &self.mesh {
            m.validate()?;
        }
        if let Some(p) = &self.prior {
            p.resolve()?;
        }
        if let Some(t) = &self.therapy {
            t.build()?;
        }
        if let Some(t) = &self.time {
            t.validate()?;
        }
        if let Some(o) = &self.observations {
            o.validate()?;
        }
        self.solver.validate().map_err(|e| config_error("solver", e))?;
        if let Some(q) = &self.qoi {
            q.validate()?;
        }
        if let Some(s) = &self.scenario {
            s.validate().map_err(|e| config_error("scenario", e))?;
        }
        Ok(())
    }
}

fn check_file(field: &str, path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(config_error(field, format!("file {} does not exist", path.display())))
    }
}

impl MeshSection {
    pub fn validate(&self) -> Result<(), CliError> {
        match (&self.path, &self.extent_mm, &self.cells) {
            (Some(p), None, None) => check_file("mesh.path", p),
            (None, Some(e), Some(c)) => {
                if e.len() != c.len() || !(2..=3).contains(&e.len()) {
                    return Err(config_error("mesh.cells", "extent_mm and cells need 2 or 3 matching entries"));
                }
                if e.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                    return Err(config_error("mesh.extent_mm", "entries must be positive"));
                }
                if c.contains(&0) {
                    return Err(config_error("mesh.cells", "entries must be positive"));
                }
                Ok(())
            }
            _ => Err(config_error("mesh", "give either `path` or both `extent_mm` and `cells`")),
        }
    }
}

impl PriorSection {
    pub fn resolve(&self) -> Result<PriorConfig, CliError> {
        let cfg = match (&self.preset, &self.layout, &self.blocks) {
            (Some(name), None, None) => PriorConfig::preset(name).map_err(|e| config_error("prior.preset", e))?,
            (None, Some(layout), Some(blocks)) => {
                PriorConfig { layout: *layout, blocks: blocks.clone(), noise_variance: None }
            }
            _ => return Err(config_error("prior", "give either `preset` or both `layout` and `blocks`")),
        };
        cfg.validate().map_err(|e| config_error("prior.blocks", e))?;
        Ok(cfg)
    }
}

impl TherapySection {
    pub fn build(&self) -> Result<TherapySchedule, CliError> {
        let mut s = TherapySchedule::untreated();
        let fields = [
            (&mut s.alpha_rt, self.alpha_rt),
            (&mut s.beta_rt, self.beta_rt),
            (&mut s.alpha_ct, self.alpha_ct),
            (&mut s.beta_ct_rate, self.beta_ct_rate),
            (&mut s.rt_gamma, self.rt_gamma),
        ];
        for (slot, value) in fields {
            if let Some(v) = value {
                *slot = v;
            }
        }
        if let Some(c) = self.chemo_sampling {
            s.chemo_sampling = c;
        }
        s.validate().map_err(|e| config_error("therapy", e))?;
        match (&self.schedule, self.stupp_start_day) {
            (Some(_), Some(_)) => Err(config_error("therapy", "give at most one of `schedule` and `stupp_start_day`")),
            (Some(path), None) => {
                check_file("therapy.schedule", path)?;
                s.load_csv(path).map_err(|e| config_error("therapy.schedule", format!("{}: {e}", path.display())))
            }
            (None, Some(day)) => {
                let course = TherapySchedule::stupp(day);
                Ok(TherapySchedule { rt_events: course.rt_events, ct_doses: course.ct_doses, ..s })
            }
            (None, None) => Ok(s),
        }
    }
}

impl TimeSection {
    pub fn validate(&self) -> Result<(), CliError> {
        tumortwin::forward::TimeGrid::new(self.t0, self.tf, self.dt).map_err(|e| config_error("time", e))?;
        if let Some(tp) = self.prediction_tf {
            if tp < self.tf {
                return Err(config_error("time.prediction_tf", "must not precede tf"));
            }
            if tp > self.tf {
                tumortwin::forward::TimeGrid::new(self.tf, tp, self.dt).map_err(|e| config_error("time.prediction_tf", e))?;
            }
        }
        if let Some(p) = &self.prediction_initial {
            check_file("time.prediction_initial", p)?;
        }
        if let Some([low, high]) = self.prediction_background {
            if !(low >= 0.0 && low <= high && high < 1.0) {
                return Err(config_error("time.prediction_background", "needs 0 <= low <= high < 1"));
            }
        }
        Ok(())
    }

    pub fn prediction_tf(&self) -> Result<f64, CliError> {
        self.prediction_tf.ok_or_else(|| config_error("time.prediction_tf", "required by this subcommand"))
    }
}

impl ObservationsSection {
    pub fn validate(&self) -> Result<(), CliError> {
        match (&self.manifest, &self.synthesis) {
            (Some(p), None) => check_file("observations.manifest", p)?,
            (None, Some(s)) => s.validate().map_err(|e| config_error("observations.synthesis", e))?,
            _ => return Err(config_error("observations", "give exactly one of `manifest` and `synthesis`")),
        }
        if let Some(p) = &self.initial_condition {
            check_file("observations.initial_condition", p)?;
        }
        if let Some(v) = self.noise_variance {
            if !(v.is_finite() && v > 0.0) {
                return Err(config_error("observations.noise_variance", "must be positive"));
            }
        }
        Ok(())
    }
}

impl QoiSection {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.kinds.is_empty() {
            return Err(config_error("qoi.kinds", "list at least one quantity"));
        }
        if self.n_samples == 0 {
            return Err(config_error("qoi.n_samples", "must be positive"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(config_error("qoi.threshold", "must lie in (0, 1)"));
        }
        match &self.reference_image {
            Some(p) => check_file("qoi.reference_image", p)?,
            None => {
                if let Some(k) = self.kinds.iter().find(|k| k.needs_reference()) {
                    return Err(config_error("qoi.reference_image", format!("required by `{}`", k.name())));
                }
            }
        }
        Ok(())
    }
}
