//! Gaussian random-field priors with squared elliptic precision.
//!
//! A prior block has covariance `Γ = A⁻¹ M_L A⁻¹` where
//! `A = γK₀ + δM + β∂M∂` and `M_L` is the lumped mass. The precision is
//! applied as `R = A M_L⁻¹ A`. The Robin term `β = √(γδ)/1.42` damps the
//! variance inflation that a pure Neumann operator produces near the
//! boundary.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::FemSpace;
use crate::mesh::Tissue;
use crate::sparse::{dot, CsrMatrix, SymmetricFactor};

/// Maps a target pointwise variance and correlation length (mm) to `(γ, δ)`.
pub fn from_hyperparameters(sigma2: f64, rho: f64) -> Result<(f64, f64)> {
    if !(sigma2 > 0.0) || !(rho > 0.0) || !sigma2.is_finite() || !rho.is_finite() {
        return Err(Error::invalid(format!("prior hyperparameters must be positive, got σ²={sigma2}, ρ={rho}")));
    }
    let sigma = sigma2.sqrt();
    let pi = std::f64::consts::PI;
    let delta = std::f64::consts::SQRT_2 / (sigma * rho * pi.sqrt());
    let gamma = rho / (4.0 * sigma * (2.0 * pi).sqrt());
    Ok((gamma, delta))
}

/// Default Robin coefficient for given `γ, δ`.
pub fn robin_coefficient(gamma: f64, delta: f64) -> f64 {
    (gamma * delta).sqrt() / 1.42
}

/// One Gaussian random field over the vertices of a mesh.
#[derive(Debug, Clone)]
pub struct GrfPrior {
    space: Arc<FemSpace>,
    mean: Vec<f64>,
    gamma: f64,
    delta: f64,
    robin: f64,
    sigma2: Option<f64>,
    rho: Option<f64>,
    a: CsrMatrix,
    a_factor: SymmetricFactor,
}

impl GrfPrior {
    pub fn new(space: Arc<FemSpace>, mean: Vec<f64>, gamma: f64, delta: f64, robin: f64) -> Result<Self> {
        if mean.len() != space.n_vertices() {
            return Err(Error::invalid("prior mean does not match the mesh"));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prior mean".into()));
        }
        if !(gamma > 0.0) || !(delta > 0.0) || !(robin >= 0.0) {
            return Err(Error::invalid("prior requires γ > 0, δ > 0, β ≥ 0"));
        }
        let a = space
            .stiffness0()
            .scaled(gamma)
            .add_scaled(delta, space.mass())
            .add_scaled(robin, &space.boundary_mass());
        let a_factor = space.factor(&a)?;
        Ok(GrfPrior { space, mean, gamma, delta, robin, sigma2: None, rho: None, a, a_factor })
    }

    /// Prior with target variance `sigma2` and correlation length `rho` (mm),
    /// using the default Robin coefficient.
    pub fn from_variance(space: Arc<FemSpace>, mean: Vec<f64>, sigma2: f64, rho: f64) -> Result<Self> {
        let (gamma, delta) = from_hyperparameters(sigma2, rho)?;
        let mut p = Self::new(space, mean, gamma, delta, robin_coefficient(gamma, delta))?;
        p.sigma2 = Some(sigma2);
        p.rho = Some(rho);
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn robin(&self) -> f64 {
        self.robin
    }

    pub fn target_variance(&self) -> Option<f64> {
        self.sigma2
    }

    pub fn correlation_length(&self) -> Option<f64> {
        self.rho
    }

    pub fn operator(&self) -> &CsrMatrix {
        &self.a
    }

    pub fn space(&self) -> &Arc<FemSpace> {
        &self.space
    }

    pub fn apply_a(&self, v: &[f64]) -> Vec<f64> {
        self.a.matvec(v)
    }

    pub fn solve_a(&self, v: &[f64]) -> Vec<f64> {
        self.a_factor.solve(v)
    }

    /// Precision action `A M_L⁻¹ A v`.
    pub fn apply_r(&self, v: &[f64]) -> Vec<f64> {
        let mut t = self.a.matvec(v);
        for (x, m) in t.iter_mut().zip(self.space.lumped_mass()) {
            *x /= m;
        }
        self.a.matvec(&t)
    }

    /// Covariance action `A⁻¹ M_L A⁻¹ v`.
    pub fn solve_r(&self, v: &[f64]) -> Vec<f64> {
        let mut t = self.a_factor.solve(v);
        for (x, m) in t.iter_mut().zip(self.space.lumped_mass()) {
            *x *= m;
        }
        self.a_factor.solve(&t)
    }

    pub fn cost(&self, m: &[f64]) -> f64 {
        let d: Vec<f64> = m.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        0.5 * dot(&d, &self.apply_r(&d))
    }

    pub fn grad(&self, m: &[f64]) -> Vec<f64> {
        let d: Vec<f64> = m.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        self.apply_r(&d)
    }

    /// A zero-mean draw `A⁻¹ M_L^{1/2} n`.
    pub fn sample_fluctuation<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let noise: Vec<f64> = self
            .space
            .lumped_mass()
            .iter()
            .map(|m| m.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.a_factor.solve(&noise)
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut s = self.sample_fluctuation(rng);
        for (x, m) in s.iter_mut().zip(&self.mean) {
            *x += m;
        }
        s
    }

    pub fn sample(&self, rng_seed: u64) -> Vec<f64> {
        self.sample_with(&mut rand_chacha::ChaCha8Rng::seed_from_u64(rng_seed))
    }

    /// Exact pointwise variance `diag(A⁻¹ M_L A⁻¹)`; one solve per vertex.
    pub fn pointwise_variance(&self) -> Vec<f64> {
        let n = self.dim();
        let lumped = self.space.lumped_mass();
        let mut var = vec![0.0; n];
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            self.a_factor.solve_into(&e, &mut col);
            e[j] = 0.0;
            for (v, c) in var.iter_mut().zip(&col) {
                *v += lumped[j] * c * c;
            }
        }
        var
    }
}

/// Independent prior blocks over a concatenated parameter vector.
#[derive(Debug, Clone)]
pub struct BlockPrior {
    blocks: Vec<(String, GrfPrior)>,
}

impl BlockPrior {
    pub fn new(blocks: Vec<(String, GrfPrior)>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::invalid("a block prior needs at least one block"));
        }
        Ok(BlockPrior { blocks })
    }

    pub fn blocks(&self) -> &[(String, GrfPrior)] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&GrfPrior> {
        self.blocks.iter().find(|b| b.0 == name).map(|b| &b.1)
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.1.dim()).sum()
    }

    fn ranges(&self) -> impl Iterator<Item = (std::ops::Range<usize>, &GrfPrior)> {
        let mut start = 0;
        self.blocks.iter().map(move |(_, p)| {
            let r = start..start + p.dim();
            start = r.end;
            (r, p)
        })
    }

    fn blockwise(&self, v: &[f64], f: impl Fn(&GrfPrior, &[f64]) -> Vec<f64>) -> Vec<f64> {
        let mut out = Vec::with_capacity(v.len());
        for (r, p) in self.ranges() {
            out.extend(f(p, &v[r]));
        }
        out
    }

    pub fn mean(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.1.mean().iter().copied()).collect()
    }

    pub fn apply_r(&self, v: &[f64]) -> Vec<f64> {
        self.blockwise(v, GrfPrior::apply_r)
    }

    pub fn solve_r(&self, v: &[f64]) -> Vec<f64> {
        self.blockwise(v, GrfPrior::solve_r)
    }

    pub fn cost(&self, m: &[f64]) -> f64 {
        self.ranges().map(|(r, p)| p.cost(&m[r])).sum()
    }

    pub fn grad(&self, m: &[f64]) -> Vec<f64> {
        self.blockwise(m, GrfPrior::grad)
    }

    pub fn sample_fluctuation<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.1.sample_fluctuation(rng)).collect()
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.1.sample_with(rng)).collect()
    }

    pub fn sample(&self, rng_seed: u64) -> Vec<f64> {
        self.sample_with(&mut rand_chacha::ChaCha8Rng::seed_from_u64(rng_seed))
    }

    pub fn pointwise_variance(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.1.pointwise_variance()).collect()
    }
}

/// Hyperparameters of one prior block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorBlockSpec {
    pub name: String,
    pub mean: f64,
    pub variance: f64,
    pub rho_mm: f64,
}

/// How the inversion parameters are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    /// `[m_D, m_κ]`, each a nodal field.
    Nodal,
    /// `[m_D_gray, m_D_white, m_κ]`, with `m_D = χ m_D_gray + (1 − χ) m_D_white`.
    GrayWhite,
}

/// A full prior description: layout plus one spec per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub layout: LayoutKind,
    pub blocks: Vec<PriorBlockSpec>,
    /// Noise variance that accompanies the preset, if any.
    #[serde(default)]
    pub noise_variance: Option<f64>,
}

impl PriorConfig {
    /// Named presets: `upenn-table2` and `ivygap-table3`.
    pub fn preset(name: &str) -> Result<Self> {
        let b = |name: &str, mean, variance, rho_mm| PriorBlockSpec { name: name.into(), mean, variance, rho_mm };
        match name {
            "upenn-table2" => Ok(PriorConfig {
                layout: LayoutKind::Nodal,
                blocks: vec![b("m_D", -1.30, 0.05, 180.0), b("m_kappa", -1.00, 0.02, 180.0)],
                noise_variance: None,
            }),
            "ivygap-table3" => Ok(PriorConfig {
                layout: LayoutKind::GrayWhite,
                blocks: vec![
                    b("m_D_gray", -1.467, 0.115, 180.0),
                    b("m_D_white", -0.991, 0.115, 360.0),
                    b("m_kappa", -1.230, 0.040, 180.0),
                ],
                noise_variance: Some(3.9e-3),
            }),
            other => Err(Error::invalid(format!("unknown prior preset {other:?}"))),
        }
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["upenn-table2", "ivygap-table3"]
    }

    pub fn validate(&self) -> Result<()> {
        let expected = match self.layout {
            LayoutKind::Nodal => 2,
            LayoutKind::GrayWhite => 3,
        };
        if self.blocks.len() != expected {
            return Err(Error::invalid(format!(
                "{:?} layout needs {expected} prior blocks, got {}",
                self.layout,
                self.blocks.len()
            )));
        }
        for b in &self.blocks {
            from_hyperparameters(b.variance, b.rho_mm)?;
            if !b.mean.is_finite() {
                return Err(Error::invalid(format!("prior block {} has a non-finite mean", b.name)));
            }
        }
        Ok(())
    }

    /// Assembles the block prior (constant means) on `space`.
    pub fn build(&self, space: &Arc<FemSpace>) -> Result<BlockPrior> {
        self.validate()?;
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let mean = vec![b.mean; space.n_vertices()];
                Ok((b.name.clone(), GrfPrior::from_variance(space.clone(), mean, b.variance, b.rho_mm)?))
            })
            .collect::<Result<Vec<_>>>()?;
        BlockPrior::new(blocks)
    }
}

/// Gray-matter indicator `χ` (1 on gray vertices, 0 elsewhere).
pub fn gray_indicator(space: &FemSpace) -> Vec<f64> {
    space.mesh().indicator(Tissue::Gray)
}
