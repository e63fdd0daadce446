//! Forecasts and clinical quantities of interest.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{FemSpace, PointInterpolator};
use crate::forward::{ForwardSolver, MassTreatment, TherapySchedule, TimeGrid};
use crate::inverse::ParameterLayout;
use crate::laplace::LowRankPosterior;
use crate::prior::BlockPrior;

/// Runs the model from a given state over a prediction window.
#[derive(Debug, Clone)]
pub struct Predictor {
    space: Arc<FemSpace>,
    layout: ParameterLayout,
    schedule: TherapySchedule,
    treatment: MassTreatment,
    u0: Vec<f64>,
    t0: f64,
    tf: f64,
    dt: f64,
}

impl Predictor {
    /// A window with `tf == t0` is allowed and returns `u0` unchanged.
    pub fn new(
        space: Arc<FemSpace>,
        layout: ParameterLayout,
        schedule: TherapySchedule,
        u0: Vec<f64>,
        (t0, tf, dt): (f64, f64, f64),
    ) -> Result<Self> {
        if u0.len() != space.n_vertices() || layout.n_vertices() != space.n_vertices() {
            return Err(Error::invalid("initial state or layout does not match the mesh"));
        }
        if tf != t0 {
            TimeGrid::new(t0, tf, dt)?;
        }
        schedule.validate()?;
        Ok(Predictor { space, layout, schedule, treatment: MassTreatment::default(), u0, t0, tf, dt })
    }

    pub fn with_mass_treatment(mut self, treatment: MassTreatment) -> Self {
        self.treatment = treatment;
        self
    }

    pub fn space(&self) -> &Arc<FemSpace> {
        &self.space
    }

    pub fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    pub fn u0(&self) -> &[f64] {
        &self.u0
    }

    pub fn window(&self) -> (f64, f64, f64) {
        (self.t0, self.tf, self.dt)
    }

    /// State at the end of the window for parameters `theta`.
    pub fn predict(&self, theta: &[f64]) -> Result<Vec<f64>> {
        if theta.len() != self.layout.dim() {
            return Err(Error::invalid("parameter vector has the wrong length"));
        }
        if self.tf == self.t0 {
            return Ok(self.u0.clone());
        }
        let grid = TimeGrid::new(self.t0, self.tf, self.dt)?;
        let (md, mk) = self.layout.split(theta);
        let solver = ForwardSolver::with_mass(&self.space, &self.schedule, grid, self.treatment)?;
        Ok(solver.solve(&md, &mk, &self.u0)?.final_state().to_vec())
    }
}

fn mask(u: &[f64], threshold: f64) -> impl Iterator<Item = bool> + '_ {
    u.iter().map(move |v| *v > threshold)
}

/// Total tumor cellularity: the integral of `u` where `u` exceeds the threshold.
pub fn ttc(space: &FemSpace, u: &[f64], threshold: f64) -> f64 {
    let masked: Vec<f64> = u.iter().zip(mask(u, threshold)).map(|(v, m)| if m { *v } else { 0.0 }).collect();
    space.integrate(&masked)
}

/// Tumor volume: the measure of the region where `u` exceeds the threshold.
pub fn tv(space: &FemSpace, u: &[f64], threshold: f64) -> f64 {
    let ind: Vec<f64> = mask(u, threshold).map(|m| if m { 1.0 } else { 0.0 }).collect();
    space.integrate(&ind)
}

/// Concordance correlation coefficient with population moments.
/// A vanishing denominator yields 0.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid(format!("ccc needs equal lengths ≥ 2, got {} and {}", x.len(), y.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    let denom = (sxx + syy) / n + (mx - my).powi(2);
    Ok(if denom == 0.0 { 0.0 } else { 2.0 * sxy / n / denom })
}

/// Dice overlap; two empty masks score 1.
pub fn dice(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("dice needs equal lengths, got {} and {}", a.len(), b.len())));
    }
    let na = a.iter().filter(|x| **x).count();
    let nb = b.iter().filter(|x| **x).count();
    if na + nb == 0 {
        return Ok(1.0);
    }
    let both = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QoiKind {
    Ttc,
    Tv,
    Ccc,
    Dice,
    RelErrTtc,
    RelErrTv,
}

impl QoiKind {
    pub fn name(self) -> &'static str {
        match self {
            QoiKind::Ttc => "ttc",
            QoiKind::Tv => "tv",
            QoiKind::Ccc => "ccc",
            QoiKind::Dice => "dice",
            QoiKind::RelErrTtc => "rel_err_ttc",
            QoiKind::RelErrTv => "rel_err_tv",
        }
    }

    pub fn needs_reference(self) -> bool {
        !matches!(self, QoiKind::Ttc | QoiKind::Tv)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QoiSpec {
    pub kind: QoiKind,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    0.1
}

impl QoiSpec {
    pub fn new(kind: QoiKind) -> Self {
        QoiSpec { kind, threshold: default_threshold() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid(format!("QoI threshold {} must lie in (0, 1)", self.threshold)));
        }
        Ok(())
    }
}

/// Observed target the prediction is scored against: global TTC and TV of
/// the target plus its values at sample points (voxel centers).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QoiReference {
    pub ttc: f64,
    pub tv: f64,
    pub dim: usize,
    pub points: Vec<f64>,
    pub values: Vec<f64>,
}

/// A QoI bound to a mesh and, where needed, a reference.
#[derive(Debug, Clone)]
pub struct Qoi {
    spec: QoiSpec,
    space: Arc<FemSpace>,
    reference: Option<QoiReference>,
    interp: Option<PointInterpolator>,
}

impl Qoi {
    pub fn new(spec: QoiSpec, space: Arc<FemSpace>, reference: Option<QoiReference>) -> Result<Self> {
        spec.validate()?;
        if spec.kind.needs_reference() && reference.is_none() {
            return Err(Error::invalid(format!("QoI `{}` needs reference data", spec.kind.name())));
        }
        let interp = match &reference {
            Some(r) if matches!(spec.kind, QoiKind::Ccc | QoiKind::Dice) => {
                if r.dim != space.mesh().dim() || r.points.len() != r.dim * r.values.len() {
                    return Err(Error::invalid("reference points do not match the reference values"));
                }
                Some(space.interpolator(&r.points)?)
            }
            _ => None,
        };
        Ok(Qoi { spec, space, reference, interp })
    }

    pub fn spec(&self) -> QoiSpec {
        self.spec
    }

    pub fn evaluate(&self, u: &[f64]) -> Result<f64> {
        let th = self.spec.threshold;
        let reference = || self.reference.as_ref().expect("checked at construction");
        Ok(match self.spec.kind {
            QoiKind::Ttc => ttc(&self.space, u, th),
            QoiKind::Tv => tv(&self.space, u, th),
            QoiKind::RelErrTtc => (ttc(&self.space, u, th) - reference().ttc) / reference().ttc,
            QoiKind::RelErrTv => (tv(&self.space, u, th) - reference().tv) / reference().tv,
            QoiKind::Ccc => {
                let pred = self.interp.as_ref().expect("built with reference").apply(u);
                ccc(&pred, &reference().values)?
            }
            QoiKind::Dice => {
                let pred = self.interp.as_ref().expect("built with reference").apply(u);
                let a: Vec<bool> = mask(&pred, th).collect();
                let b: Vec<bool> = mask(&reference().values, th).collect();
                dice(&a, &b)?
            }
        })
    }
}

/// Source of parameter samples for a pushforward.
#[derive(Debug, Clone, Copy)]
pub enum Sampler<'a> {
    Prior(&'a BlockPrior),
    Posterior(&'a LowRankPosterior),
    /// Always returns the same parameters.
    Fixed(&'a [f64]),
}

impl Sampler<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Sampler::Prior(_) => "prior",
            Sampler::Posterior(_) => "posterior",
            Sampler::Fixed(_) => "fixed",
        }
    }

    pub fn draw(&self, seed: u64) -> Vec<f64> {
        match self {
            Sampler::Prior(p) => p.sample(seed),
            Sampler::Posterior(p) => p.sample_posterior(seed),
            Sampler::Fixed(m) => m.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub seed: u64,
    /// `None` when the sample failed.
    pub value: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PushforwardResult {
    pub source: String,
    pub qoi: QoiKind,
    pub records: Vec<SampleRecord>,
}

impl PushforwardResult {
    /// Values of the successful samples in index order.
    pub fn values(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.value).collect()
    }

    pub fn n_failed(&self) -> usize {
        self.records.iter().filter(|r| r.value.is_none()).count()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "sample_index,seed,qoi_value,status")?;
        for r in &self.records {
            match r.value {
                Some(v) => writeln!(out, "{},{},{:.17e},{}", r.index, r.seed, v, r.status)?,
                None => writeln!(out, "{},{},,{}", r.index, r.seed, r.status)?,
            }
        }
        Ok(())
    }

    pub fn read_csv(text: &str, source: &str, qoi: QoiKind) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("sample_index,seed,qoi_value,status") {
            return Err(Error::format("pushforward csv", "unexpected header"));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.splitn(4, ',').collect();
            let bad = || Error::format("pushforward csv", format!("malformed row {}", i + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            records.push(SampleRecord {
                index: f[0].parse().map_err(|_| bad())?,
                seed: f[1].parse().map_err(|_| bad())?,
                value: if f[2].is_empty() { None } else { Some(f[2].parse().map_err(|_| bad())?) },
                status: f[3].to_string(),
            });
        }
        Ok(PushforwardResult { source: source.to_string(), qoi, records })
    }
}

/// Maximum fraction of failed samples before a batch is rejected.
pub const MAX_FAILURE_FRACTION: f64 = 0.1;

/// Propagates `n_samples` draws through the predictor and evaluates every
/// QoI on each forecast. Sample `i` uses seed `base_seed + i`.
pub fn pushforward(
    sampler: Sampler<'_>,
    predictor: &Predictor,
    qois: &[Qoi],
    n_samples: usize,
    base_seed: u64,
) -> Result<Vec<PushforwardResult>> {
    if n_samples == 0 {
        return Err(Error::invalid("pushforward needs at least one sample"));
    }
    let outcomes: Vec<(u64, std::result::Result<Vec<f64>, String>)> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let seed = base_seed.wrapping_add(i as u64);
            let outcome = predictor.predict(&sampler.draw(seed)).and_then(|u| {
                qois.iter()
                    .map(|q| {
                        let v = q.evaluate(&u)?;
                        if v.is_finite() {
                            Ok(v)
                        } else {
                            Err(Error::NonFinite(format!("QoI `{}`", q.spec.kind.name())))
                        }
                    })
                    .collect::<Result<Vec<f64>>>()
            });
            match outcome {
                Ok(v) => Ok((seed, Ok(v))),
                Err(e) if e.is_solver_failure() => Ok((seed, Err(e.to_string()))),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let failed = outcomes.iter().filter(|(_, o)| o.is_err()).count();
    if failed as f64 > MAX_FAILURE_FRACTION * n_samples as f64 {
        return Err(Error::BatchFailure { failed, total: n_samples });
    }
    Ok(qois
        .iter()
        .enumerate()
        .map(|(k, q)| PushforwardResult {
            source: sampler.name().to_string(),
            qoi: q.spec.kind,
            records: outcomes
                .iter()
                .enumerate()
                .map(|(index, (seed, o))| match o {
                    Ok(v) => SampleRecord { index, seed: *seed, value: Some(v[k]), status: "ok".into() },
                    Err(msg) => SampleRecord { index, seed: *seed, value: None, status: format!("failed: {}", msg.replace([',', '\n'], ";")) },
                })
                .collect(),
        })
        .collect())
}
