//! P1 finite-element kernels on simplicial meshes.
//!
//! [`FemSpace`] precomputes per-cell geometry (measures, barycentric
//! gradients) and the vertex-adjacency sparsity pattern once; every operator
//! in the crate is assembled into that shared pattern. Coefficient fields are
//! handled in log form: the nodal log-coefficient is averaged to the cell
//! centroid and then exponentiated. Nonlinear reaction terms use the same
//! centroid (midpoint) rule, which keeps the discrete derivatives simple
//! enough to transpose by hand in [`crate::inverse`].

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::sparse::{CsrMatrix, EnvelopeOrdering, SymmetricFactor};

/// Nodal values of a piecewise-linear scalar function on a mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    values: Vec<f64>,
}

impl Field {
    /// Wraps `values`, checking the length against `mesh` and finiteness.
    pub fn new(mesh: &Mesh, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.n_vertices() {
            return Err(Error::invalid(format!(
                "field has {} values but the mesh has {} vertices",
                values.len(),
                mesh.n_vertices()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field values".into()));
        }
        Ok(Field { values })
    }

    pub fn constant(mesh: &Mesh, value: f64) -> Self {
        Field { values: vec![value; mesh.n_vertices()] }
    }

    /// Evaluates `f` at every vertex.
    pub fn from_fn(mesh: &Mesh, f: impl Fn(&[f64]) -> f64) -> Self {
        Field {
            values: (0..mesh.n_vertices()).map(|i| f(mesh.vertex(i))).collect(),
        }
    }

    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        Field { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

impl std::ops::Deref for Field {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.values
    }
}

/// Quadrature rules on the reference simplex.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadratureRule {
    Vertex,
    Centroid,
    Degree2,
}

/// Points (barycentric coordinates) and weights on the reference simplex.
/// Weights sum to the reference-cell measure (1/2 in 2D, 1/6 in 3D).
#[derive(Debug, Clone)]
pub struct Quadrature {
    pub rule: QuadratureRule,
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl Quadrature {
    pub fn new(rule: QuadratureRule, dim: usize) -> Self {
        let nloc = dim + 1;
        let ref_vol = if dim == 2 { 0.5 } else { 1.0 / 6.0 };
        let unit = |k: usize| (0..nloc).map(|j| if j == k { 1.0 } else { 0.0 }).collect::<Vec<_>>();
        let (points, weights) = match rule {
            QuadratureRule::Vertex => ((0..nloc).map(unit).collect(), vec![ref_vol / nloc as f64; nloc]),
            QuadratureRule::Centroid => (vec![vec![1.0 / nloc as f64; nloc]], vec![ref_vol]),
            QuadratureRule::Degree2 => {
                let (a, b) = if dim == 2 {
                    (2.0 / 3.0, 1.0 / 6.0)
                } else {
                    (0.585_410_196_624_968_5, 0.138_196_601_125_010_5)
                };
                let pts = (0..nloc)
                    .map(|k| (0..nloc).map(|j| if j == k { a } else { b }).collect())
                    .collect();
                (pts, vec![ref_vol / nloc as f64; nloc])
            }
        };
        Quadrature { rule, points, weights }
    }
}

/// Quadrature of the logistic reaction term within a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReactionRule {
    /// `u(1−u)` at the centroid value of `u`.
    Centroid,
    /// `u(1−u)` at each vertex, weighted by `vol/(d+1)` (mass-lumped).
    Vertex,
}

/// Precomputed P1 geometry and sparsity for one mesh.
#[derive(Debug)]
pub struct FemSpace {
    mesh: Arc<Mesh>,
    nloc: usize,
    volumes: Vec<f64>,
    /// Barycentric gradients, `nloc * dim` per cell.
    grads: Vec<f64>,
    /// `vol * ∇φ_a · ∇φ_b`, `nloc²` per cell.
    k0_local: Vec<f64>,
    /// Position in the CSR value array of each local pair, `nloc²` per cell.
    slots: Vec<usize>,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    mass: CsrMatrix,
    lumped: Vec<f64>,
    stiffness0: CsrMatrix,
    ordering: Arc<EnvelopeOrdering>,
}

impl FemSpace {
    pub fn new(mesh: Arc<Mesh>) -> Result<Self> {
        let dim = mesh.dim();
        let nloc = dim + 1;
        let nc = mesh.n_cells();
        let nv = mesh.n_vertices();
        let mut volumes = Vec::with_capacity(nc);
        let mut grads = Vec::with_capacity(nc * nloc * dim);
        for c in 0..nc {
            let cell = mesh.cell(c);
            let x0 = mesh.vertex(cell[0]);
            let jac = nalgebra::DMatrix::from_fn(dim, dim, |r, k| mesh.vertex(cell[k + 1])[r] - x0[r]);
            let det = jac.determinant();
            let vol = det / if dim == 2 { 2.0 } else { 6.0 };
            let size = (0..dim)
                .map(|k| (0..dim).map(|r| jac[(r, k)].powi(2)).sum::<f64>())
                .fold(0.0_f64, f64::max);
            if !(vol > 1e-12 * size.powf(dim as f64 / 2.0)) {
                return Err(Error::Assembly {
                    cell: c,
                    message: format!("degenerate cell with measure {vol:e}"),
                });
            }
            let inv = jac.try_inverse().ok_or_else(|| Error::Assembly {
                cell: c,
                message: "singular cell Jacobian".into(),
            })?;
            let mut g = vec![0.0; nloc * dim];
            for k in 1..nloc {
                for r in 0..dim {
                    g[k * dim + r] = inv[(k - 1, r)];
                    g[r] -= inv[(k - 1, r)];
                }
            }
            volumes.push(vol);
            grads.extend(g);
        }

        // vertex adjacency pattern
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nv];
        for c in 0..nc {
            let cell = mesh.cell(c);
            for &a in cell {
                adj[a].extend_from_slice(cell);
            }
        }
        let mut row_ptr = Vec::with_capacity(nv + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for row in &mut adj {
            row.sort_unstable();
            row.dedup();
            col_idx.extend_from_slice(row);
            row_ptr.push(col_idx.len());
        }
        let mut slots = Vec::with_capacity(nc * nloc * nloc);
        for c in 0..nc {
            let cell = mesh.cell(c);
            for &a in cell {
                let row = &col_idx[row_ptr[a]..row_ptr[a + 1]];
                for &b in cell {
                    slots.push(row_ptr[a] + row.binary_search(&b).unwrap());
                }
            }
        }

        let mut k0_local = Vec::with_capacity(nc * nloc * nloc);
        for c in 0..nc {
            let g = &grads[c * nloc * dim..(c + 1) * nloc * dim];
            for a in 0..nloc {
                for b in 0..nloc {
                    let d: f64 = (0..dim).map(|r| g[a * dim + r] * g[b * dim + r]).sum();
                    k0_local.push(volumes[c] * d);
                }
            }
        }

        let mut space = FemSpace {
            mesh,
            nloc,
            volumes,
            grads,
            k0_local,
            slots,
            mass: CsrMatrix::zeros_with_pattern(nv, row_ptr.clone(), col_idx.clone()),
            row_ptr,
            col_idx,
            lumped: Vec::new(),
            stiffness0: CsrMatrix::zeros_with_pattern(0, vec![0], vec![]),
            ordering: Arc::new(EnvelopeOrdering::reverse_cuthill_mckee(&CsrMatrix::diagonal(&[]))),
        };
        let denom = (nloc * (nloc + 1)) as f64;
        let mut mass = space.zero_matrix();
        {
            let vals = mass.values_mut();
            for c in 0..nc {
                let base = c * nloc * nloc;
                for a in 0..nloc {
                    for b in 0..nloc {
                        let m = if a == b { 2.0 } else { 1.0 };
                        vals[space.slots[base + a * nloc + b]] += space.volumes[c] * m / denom;
                    }
                }
            }
        }
        let mut lumped = vec![0.0; nv];
        for c in 0..nc {
            for &a in space.mesh.cell(c) {
                lumped[a] += space.volumes[c] / nloc as f64;
            }
        }
        space.stiffness0 = space.stiffness_from_cell_coeffs(&vec![1.0; nc]);
        space.ordering = Arc::new(EnvelopeOrdering::reverse_cuthill_mckee(&mass));
        space.mass = mass;
        space.lumped = lumped;
        Ok(space)
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn mesh_arc(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn n_vertices(&self) -> usize {
        self.mesh.n_vertices()
    }

    pub fn n_cells(&self) -> usize {
        self.mesh.n_cells()
    }

    pub fn nloc(&self) -> usize {
        self.nloc
    }

    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    pub fn cell(&self, c: usize) -> &[usize] {
        self.mesh.cell(c)
    }

    /// `vol · ∇φ_a · ∇φ_b` for cell `c`, row-major `nloc × nloc`.
    pub fn local_stiffness(&self, c: usize) -> &[f64] {
        let n2 = self.nloc * self.nloc;
        &self.k0_local[c * n2..(c + 1) * n2]
    }

    /// Consistent mass matrix.
    pub fn mass(&self) -> &CsrMatrix {
        &self.mass
    }

    /// Diagonal of the lumped mass matrix (row sums of the consistent mass).
    pub fn lumped_mass(&self) -> &[f64] {
        &self.lumped
    }

    /// Lumped mass as a matrix on the shared pattern.
    pub fn lumped_mass_matrix(&self) -> CsrMatrix {
        let mut m = self.zero_matrix();
        for (i, &l) in self.lumped.iter().enumerate() {
            let row = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
            m.values_mut()[self.row_ptr[i] + row.binary_search(&i).unwrap()] = l;
        }
        m
    }

    /// Stiffness matrix with unit coefficient.
    pub fn stiffness0(&self) -> &CsrMatrix {
        &self.stiffness0
    }

    pub fn ordering(&self) -> &Arc<EnvelopeOrdering> {
        &self.ordering
    }

    /// All-zero matrix with the vertex-adjacency pattern.
    pub fn zero_matrix(&self) -> CsrMatrix {
        CsrMatrix::zeros_with_pattern(self.n_vertices(), self.row_ptr.clone(), self.col_idx.clone())
    }

    pub fn factor(&self, a: &CsrMatrix) -> Result<SymmetricFactor> {
        SymmetricFactor::factor(a, &self.ordering)
    }

    /// `exp` of the centroid value of a nodal log-field, per cell.
    pub fn cell_exp_mean(&self, log_field: &[f64]) -> Vec<f64> {
        (0..self.n_cells()).map(|c| self.cell_mean(c, log_field).exp()).collect()
    }

    #[inline]
    pub fn cell_mean(&self, c: usize, field: &[f64]) -> f64 {
        self.cell(c).iter().map(|&v| field[v]).sum::<f64>() / self.nloc as f64
    }

    /// `Σ_c coeff_c · K0_c`.
    pub fn stiffness_from_cell_coeffs(&self, coeff: &[f64]) -> CsrMatrix {
        let mut k = self.zero_matrix();
        let n2 = self.nloc * self.nloc;
        let vals = k.values_mut();
        for (c, &w) in coeff.iter().enumerate() {
            let slots = &self.slots[c * n2..(c + 1) * n2];
            let local = &self.k0_local[c * n2..(c + 1) * n2];
            for (s, l) in slots.iter().zip(local) {
                vals[*s] += w * l;
            }
        }
        k
    }

    /// Stiffness with coefficient `exp(m̄)`, `m̄` the centroid value of `log_coeff`.
    pub fn stiffness(&self, log_coeff: &[f64]) -> Result<CsrMatrix> {
        self.check_len(log_coeff)?;
        let coeff = self.cell_exp_mean(log_coeff);
        if let Some(c) = coeff.iter().position(|v| !v.is_finite()) {
            return Err(Error::Assembly { cell: c, message: "non-finite diffusion coefficient".into() });
        }
        Ok(self.stiffness_from_cell_coeffs(&coeff))
    }

    /// Reaction load `b_i = ∫ κ u(1−u) φ_i` and its Jacobian, centroid rule.
    pub fn reaction(&self, log_kappa: &[f64], u: &[f64]) -> Result<(Vec<f64>, CsrMatrix)> {
        self.check_len(log_kappa)?;
        self.check_len(u)?;
        if u.iter().chain(log_kappa).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("reaction inputs".into()));
        }
        let kappa = self.cell_exp_mean(log_kappa);
        let mut b = vec![0.0; self.n_vertices()];
        let mut jac = self.zero_matrix();
        self.reaction_into(&kappa, u, &mut b, jac.values_mut(), 1.0);
        Ok((b, jac))
    }

    /// Accumulates `b += R(u)` and `jac += scale · R'(u)` for per-cell rates.
    pub(crate) fn reaction_into(&self, kappa: &[f64], u: &[f64], b: &mut [f64], jac: &mut [f64], scale: f64) {
        self.reaction_rule_into(ReactionRule::Centroid, kappa, u, b, jac, scale);
    }

    pub(crate) fn reaction_rule_into(
        &self,
        rule: ReactionRule,
        kappa: &[f64],
        u: &[f64],
        b: &mut [f64],
        jac: &mut [f64],
        scale: f64,
    ) {
        let nl = self.nloc as f64;
        let n2 = self.nloc * self.nloc;
        for c in 0..self.n_cells() {
            let cell = self.cell(c);
            let w = kappa[c] * self.volumes[c] / nl;
            let slots = &self.slots[c * n2..(c + 1) * n2];
            match rule {
                ReactionRule::Centroid => {
                    let ub = self.cell_mean(c, u);
                    let load = w * ub * (1.0 - ub);
                    for &a in cell {
                        b[a] += load;
                    }
                    let d = scale * w * (1.0 - 2.0 * ub) / nl;
                    for s in slots {
                        jac[*s] += d;
                    }
                }
                ReactionRule::Vertex => {
                    for (k, &a) in cell.iter().enumerate() {
                        b[a] += w * u[a] * (1.0 - u[a]);
                        jac[slots[k * self.nloc + k]] += scale * w * (1.0 - 2.0 * u[a]);
                    }
                }
            }
        }
    }

    /// Per-vertex reaction weight `Σ_{c∋a} κ_c vol_c / (d+1)` for the vertex rule.
    pub fn vertex_reaction_weights(&self, kappa: &[f64]) -> Vec<f64> {
        let mut k = vec![0.0; self.n_vertices()];
        let nl = self.nloc as f64;
        for c in 0..self.n_cells() {
            for &a in self.cell(c) {
                k[a] += kappa[c] * self.volumes[c] / nl;
            }
        }
        k
    }

    /// Integral of the P1 interpolant: `1ᵀ M v`.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.lumped.iter().zip(values).map(|(m, v)| m * v).sum()
    }

    /// Mass matrix of the boundary facets (Robin term).
    pub fn boundary_mass(&self) -> CsrMatrix {
        let mesh = &self.mesh;
        let dim = mesh.dim();
        let mut bm = self.zero_matrix();
        let denom = (dim * (dim + 1)) as f64;
        for f in 0..mesh.n_boundary_facets() {
            let facet = mesh.boundary_facet(f);
            let measure = facet_measure(mesh, facet);
            for &a in facet {
                let row = &self.col_idx[self.row_ptr[a]..self.row_ptr[a + 1]];
                for &b in facet {
                    let k = self.row_ptr[a] + row.binary_search(&b).unwrap();
                    let m = if a == b { 2.0 } else { 1.0 };
                    bm.values_mut()[k] += measure * m / denom;
                }
            }
        }
        bm
    }

    /// Barycentric coordinates of `x` in cell `c`.
    pub fn barycentric(&self, c: usize, x: &[f64]) -> Vec<f64> {
        let dim = self.mesh.dim();
        let cell = self.cell(c);
        let x0 = self.mesh.vertex(cell[0]);
        let g = &self.grads[c * self.nloc * dim..(c + 1) * self.nloc * dim];
        let mut lam = vec![0.0; self.nloc];
        let mut rest = 1.0;
        for k in 1..self.nloc {
            let l: f64 = (0..dim).map(|r| g[k * dim + r] * (x[r] - x0[r])).sum();
            lam[k] = l;
            rest -= l;
        }
        lam[0] = rest;
        lam
    }

    /// Builds the P1 observation operator for `points` (flat, `dim` per point).
    pub fn interpolator(&self, points: &[f64]) -> Result<PointInterpolator> {
        let dim = self.mesh.dim();
        if points.len() % dim != 0 {
            return Err(Error::invalid("point array length is not a multiple of dim"));
        }
        let locator = CellLocator::new(self);
        let npts = points.len() / dim;
        let mut vertex_ids = Vec::with_capacity(npts * self.nloc);
        let mut weights = Vec::with_capacity(npts * self.nloc);
        for (p, x) in points.chunks_exact(dim).enumerate() {
            let (c, lam) = locator.locate(self, x).ok_or(Error::OutOfDomain { index: p })?;
            vertex_ids.extend_from_slice(self.cell(c));
            weights.extend(lam);
        }
        Ok(PointInterpolator {
            n_vertices: self.n_vertices(),
            nloc: self.nloc,
            vertex_ids,
            weights,
        })
    }

    /// True when `x` lies in the mesh (with barycentric slack `1e-10`).
    pub fn contains(&self, x: &[f64]) -> bool {
        CellLocator::new(self).locate(self, x).is_some()
    }

    /// Membership test for many points at once.
    pub fn contains_points(&self, points: &[f64]) -> Vec<bool> {
        let locator = CellLocator::new(self);
        points.chunks_exact(self.mesh.dim()).map(|x| locator.locate(self, x).is_some()).collect()
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.n_vertices() {
            return Err(Error::invalid(format!(
                "vector of length {} does not match {} vertices",
                v.len(),
                self.n_vertices()
            )));
        }
        Ok(())
    }
}

fn facet_measure(mesh: &Mesh, facet: &[usize]) -> f64 {
    let x0 = mesh.vertex(facet[0]);
    let e: Vec<Vec<f64>> = facet[1..]
        .iter()
        .map(|&v| mesh.vertex(v).iter().zip(x0).map(|(a, b)| a - b).collect())
        .collect();
    if e.len() == 1 {
        e[0].iter().map(|x| x * x).sum::<f64>().sqrt()
    } else {
        let (a, b) = (&e[0], &e[1]);
        let cr = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
        0.5 * cr.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Uniform bucket grid over cell bounding boxes.
struct CellLocator {
    lo: Vec<f64>,
    h: Vec<f64>,
    n: Vec<usize>,
    buckets: Vec<Vec<usize>>,
}

impl CellLocator {
    const SLACK: f64 = 1e-10;

    fn new(space: &FemSpace) -> Self {
        let mesh = space.mesh();
        let dim = mesh.dim();
        let (lo, hi) = mesh.bounding_box();
        let per_axis = ((space.n_cells() as f64).powf(1.0 / dim as f64).ceil() as usize).max(1);
        let n = vec![per_axis; dim];
        let h: Vec<f64> = (0..dim).map(|k| ((hi[k] - lo[k]) / per_axis as f64).max(1e-300)).collect();
        let total: usize = n.iter().product();
        let mut buckets = vec![Vec::new(); total];
        for c in 0..space.n_cells() {
            let mut cmin = vec![f64::INFINITY; dim];
            let mut cmax = vec![f64::NEG_INFINITY; dim];
            for &v in space.cell(c) {
                for (k, &x) in mesh.vertex(v).iter().enumerate() {
                    cmin[k] = cmin[k].min(x);
                    cmax[k] = cmax[k].max(x);
                }
            }
            let range: Vec<(usize, usize)> = (0..dim)
                .map(|k| {
                    let a = ((cmin[k] - lo[k]) / h[k] - 1e-9).floor().max(0.0) as usize;
                    let b = ((cmax[k] - lo[k]) / h[k] + 1e-9).floor().max(0.0) as usize;
                    (a.min(n[k] - 1), b.min(n[k] - 1))
                })
                .collect();
            let mut idx = vec![0; dim];
            for_each_index(&range, &mut idx, 0, &mut |idx| {
                let flat = flat_index(idx, &n);
                buckets[flat].push(c);
            });
        }
        CellLocator { lo, h, n, buckets }
    }

    fn locate(&self, space: &FemSpace, x: &[f64]) -> Option<(usize, Vec<f64>)> {
        let dim = x.len();
        let mut idx = Vec::with_capacity(dim);
        for k in 0..dim {
            let t = (x[k] - self.lo[k]) / self.h[k];
            if t < -1e-6 || t > self.n[k] as f64 + 1e-6 {
                return None;
            }
            idx.push((t.floor().max(0.0) as usize).min(self.n[k] - 1));
        }
        let mut best: Option<(usize, Vec<f64>, f64)> = None;
        for &c in &self.buckets[flat_index(&idx, &self.n)] {
            let lam = space.barycentric(c, x);
            let worst = lam.iter().copied().fold(f64::INFINITY, f64::min);
            if worst >= -Self::SLACK && best.as_ref().is_none_or(|b| worst > b.2) {
                best = Some((c, lam, worst));
            }
        }
        best.map(|(c, lam, _)| (c, lam))
    }
}

fn flat_index(idx: &[usize], n: &[usize]) -> usize {
    idx.iter().rev().zip(n.iter().rev()).fold(0, |acc, (&i, &ni)| acc * ni + i)
}

fn for_each_index(range: &[(usize, usize)], idx: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == range.len() {
        f(idx);
        return;
    }
    for i in range[k].0..=range[k].1 {
        idx[k] = i;
        for_each_index(range, idx, k + 1, f);
    }
}

/// P1 point-evaluation operator `B` and its exact transpose.
#[derive(Debug, Clone)]
pub struct PointInterpolator {
    n_vertices: usize,
    nloc: usize,
    vertex_ids: Vec<usize>,
    weights: Vec<f64>,
}

impl PointInterpolator {
    pub fn n_points(&self) -> usize {
        self.vertex_ids.len() / self.nloc
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    /// `B u`.
    pub fn apply(&self, field: &[f64]) -> Vec<f64> {
        self.vertex_ids
            .chunks_exact(self.nloc)
            .zip(self.weights.chunks_exact(self.nloc))
            .map(|(ids, w)| ids.iter().zip(w).map(|(&v, wk)| wk * field[v]).sum())
            .collect()
    }

    /// `Bᵀ y`.
    pub fn transpose_scatter(&self, values: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_vertices];
        self.transpose_scatter_add(1.0, values, &mut out);
        out
    }

    /// `out += alpha · Bᵀ y`.
    pub fn transpose_scatter_add(&self, alpha: f64, values: &[f64], out: &mut [f64]) {
        for ((ids, w), y) in self
            .vertex_ids
            .chunks_exact(self.nloc)
            .zip(self.weights.chunks_exact(self.nloc))
            .zip(values)
        {
            for (&v, wk) in ids.iter().zip(w) {
                out[v] += alpha * wk * y;
            }
        }
    }
}

/// Consistent P1 mass matrix of `mesh`.
pub fn assemble_mass(mesh: &Mesh) -> Result<CsrMatrix> {
    Ok(FemSpace::new(Arc::new(mesh.clone()))?.mass().clone())
}

/// Lumped mass diagonal of `mesh`.
pub fn assemble_lumped_mass(mesh: &Mesh) -> Result<Vec<f64>> {
    Ok(FemSpace::new(Arc::new(mesh.clone()))?.lumped_mass().to_vec())
}

/// Stiffness matrix with coefficient `exp(log_coeff)` (centroid evaluation).
pub fn assemble_stiffness(mesh: &Mesh, log_coeff: &Field) -> Result<CsrMatrix> {
    FemSpace::new(Arc::new(mesh.clone()))?.stiffness(log_coeff)
}

/// Reaction vector and Jacobian for `exp(log_kappa) u (1 − u)`.
pub fn assemble_reaction(mesh: &Mesh, log_kappa: &Field, u: &Field) -> Result<(Vec<f64>, CsrMatrix)> {
    FemSpace::new(Arc::new(mesh.clone()))?.reaction(log_kappa, u)
}

/// Values of `field` at `points`.
pub fn interpolate_at_points(mesh: &Mesh, field: &Field, points: &[f64]) -> Result<Vec<f64>> {
    let space = FemSpace::new(Arc::new(mesh.clone()))?;
    Ok(space.interpolator(points)?.apply(field))
}

/// `1ᵀ M v` for nodal values `v`.
pub fn integrate(mesh: &Mesh, nodal_values: &Field) -> Result<f64> {
    Ok(FemSpace::new(Arc::new(mesh.clone()))?.integrate(nodal_values))
}
