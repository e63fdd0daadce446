//! Simplicial meshes with per-vertex tissue labels.
//!
//! A [`Mesh`] is a conforming triangulation (2D) or tetrahedralization (3D)
//! of the spatial domain. Cells are stored with positive orientation; the
//! boundary is the set of facets owned by exactly one cell. Meshes are
//! immutable once built and can be shared freely across threads.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tissue class attached to each vertex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Tissue {
    #[default]
    None,
    Gray,
    White,
}

impl Tissue {
    pub const NAMES: [&'static str; 3] = ["none", "gray", "white"];

    pub fn code(self) -> u8 {
        match self {
            Tissue::None => 0,
            Tissue::Gray => 1,
            Tissue::White => 2,
        }
    }

    pub fn name(self) -> &'static str {
        Self::NAMES[self.code() as usize]
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "none" => Some(Tissue::None),
            "gray" => Some(Tissue::Gray),
            "white" => Some(Tissue::White),
            _ => None,
        }
    }
}

/// A P1 simplicial mesh. Coordinates are in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    dim: usize,
    coords: Vec<f64>,
    cells: Vec<usize>,
    labels: Vec<Tissue>,
    boundary_facets: Vec<usize>,
}

impl Mesh {
    /// Builds a mesh from flat coordinate and connectivity arrays.
    ///
    /// Negatively oriented cells are flipped. Cells of zero volume are kept
    /// so that finite-element assembly can report them by index.
    pub fn new(dim: usize, coords: Vec<f64>, cells: Vec<usize>, labels: Vec<Tissue>) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::invalid(format!("mesh dimension must be 2 or 3, got {dim}")));
        }
        if coords.len() % dim != 0 {
            return Err(Error::invalid("coordinate array length is not a multiple of dim"));
        }
        let nv = coords.len() / dim;
        let nloc = dim + 1;
        if cells.len() % nloc != 0 || cells.is_empty() {
            return Err(Error::invalid("cell array is empty or not a multiple of dim + 1"));
        }
        if labels.len() != nv {
            return Err(Error::invalid(format!(
                "{} labels supplied for {nv} vertices",
                labels.len()
            )));
        }
        if coords.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("mesh coordinates".into()));
        }
        let mut used = vec![false; nv];
        for &v in &cells {
            if v >= nv {
                return Err(Error::invalid(format!("cell references vertex {v} but only {nv} exist")));
            }
            used[v] = true;
        }
        if let Some(v) = used.iter().position(|u| !u) {
            return Err(Error::invalid(format!("vertex {v} belongs to no cell")));
        }
        let mut mesh = Mesh {
            dim,
            coords,
            cells,
            labels,
            boundary_facets: Vec::new(),
        };
        for c in 0..mesh.n_cells() {
            if mesh.signed_volume(c) < 0.0 {
                mesh.cells.swap(c * nloc, c * nloc + 1);
            }
        }
        mesh.boundary_facets = mesh.find_boundary_facets();
        Ok(mesh)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_vertices(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len() / (self.dim + 1)
    }

    pub fn vertex(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn cell(&self, c: usize) -> &[usize] {
        let nloc = self.dim + 1;
        &self.cells[c * nloc..(c + 1) * nloc]
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn labels(&self) -> &[Tissue] {
        &self.labels
    }

    /// Boundary facets, `dim` vertex indices each.
    pub fn boundary_facets(&self) -> &[usize] {
        &self.boundary_facets
    }

    pub fn n_boundary_facets(&self) -> usize {
        self.boundary_facets.len() / self.dim
    }

    pub fn boundary_facet(&self, f: usize) -> &[usize] {
        &self.boundary_facets[f * self.dim..(f + 1) * self.dim]
    }

    /// Signed measure of cell `c` (area in 2D, volume in 3D).
    pub fn signed_volume(&self, c: usize) -> f64 {
        let cell = self.cell(c);
        let x0 = self.vertex(cell[0]);
        if self.dim == 2 {
            let (a, b) = (self.vertex(cell[1]), self.vertex(cell[2]));
            0.5 * ((a[0] - x0[0]) * (b[1] - x0[1]) - (a[1] - x0[1]) * (b[0] - x0[0]))
        } else {
            let e: Vec<[f64; 3]> = cell[1..]
                .iter()
                .map(|&v| {
                    let x = self.vertex(v);
                    [x[0] - x0[0], x[1] - x0[1], x[2] - x0[2]]
                })
                .collect();
            let det = e[0][0] * (e[1][1] * e[2][2] - e[1][2] * e[2][1])
                - e[0][1] * (e[1][0] * e[2][2] - e[1][2] * e[2][0])
                + e[0][2] * (e[1][0] * e[2][1] - e[1][1] * e[2][0]);
            det / 6.0
        }
    }

    /// Axis-aligned bounding box as `(min, max)` per axis.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::INFINITY; self.dim];
        let mut hi = vec![f64::NEG_INFINITY; self.dim];
        for x in self.coords.chunks_exact(self.dim) {
            for k in 0..self.dim {
                lo[k] = lo[k].min(x[k]);
                hi[k] = hi[k].max(x[k]);
            }
        }
        (lo, hi)
    }

    /// Per-vertex indicator (1.0 / 0.0) of the given tissue.
    pub fn indicator(&self, tissue: Tissue) -> Vec<f64> {
        self.labels.iter().map(|&t| if t == tissue { 1.0 } else { 0.0 }).collect()
    }

    fn find_boundary_facets(&self) -> Vec<usize> {
        let nloc = self.dim + 1;
        let mut count: HashMap<Vec<usize>, (usize, Vec<usize>)> = HashMap::new();
        for c in 0..self.n_cells() {
            let cell = self.cell(c);
            for skip in 0..nloc {
                // facet opposite local vertex `skip`
                let facet: Vec<usize> = (0..nloc).filter(|&k| k != skip).map(|k| cell[k]).collect();
                let mut key = facet.clone();
                key.sort_unstable();
                count.entry(key).and_modify(|e| e.0 += 1).or_insert((1, facet));
            }
        }
        let mut facets: Vec<(Vec<usize>, Vec<usize>)> = count
            .into_iter()
            .filter(|(_, (n, _))| *n == 1)
            .map(|(k, (_, f))| (k, f))
            .collect();
        facets.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        facets.into_iter().flat_map(|(_, f)| f).collect()
    }
}

/// Uniform simplicial subdivision of the box `[0, extent]`.
///
/// Squares are split into two triangles along the main diagonal, cubes into
/// six tetrahedra sharing the main diagonal (Kuhn subdivision). Both splits
/// are conforming across neighbouring boxes. Vertices are numbered
/// lexicographically with the x index fastest.
pub fn generate_structured(extent_mm: &[f64], resolution: &[usize], dim: usize) -> Result<Mesh> {
    if dim != 2 && dim != 3 {
        return Err(Error::invalid(format!("structured meshes are 2D or 3D, got dim {dim}")));
    }
    if extent_mm.len() != dim || resolution.len() != dim {
        return Err(Error::invalid("extent and resolution must have one entry per axis"));
    }
    if extent_mm.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
        return Err(Error::invalid("extent must be positive on every axis"));
    }
    if resolution.iter().any(|&r| r == 0) {
        return Err(Error::invalid("resolution must be at least 1 on every axis"));
    }
    let np: Vec<usize> = resolution.iter().map(|r| r + 1).collect();
    let h: Vec<f64> = (0..dim).map(|k| extent_mm[k] / resolution[k] as f64).collect();

    let nv: usize = np.iter().product();
    let mut coords = Vec::with_capacity(nv * dim);
    let mut cells = Vec::new();
    if dim == 2 {
        for j in 0..np[1] {
            for i in 0..np[0] {
                coords.push(i as f64 * h[0]);
                coords.push(j as f64 * h[1]);
            }
        }
        let id = |i: usize, j: usize| i + np[0] * j;
        for j in 0..resolution[1] {
            for i in 0..resolution[0] {
                let (v00, v10, v01, v11) = (id(i, j), id(i + 1, j), id(i, j + 1), id(i + 1, j + 1));
                cells.extend_from_slice(&[v00, v10, v11, v00, v11, v01]);
            }
        }
    } else {
        for k in 0..np[2] {
            for j in 0..np[1] {
                for i in 0..np[0] {
                    coords.push(i as f64 * h[0]);
                    coords.push(j as f64 * h[1]);
                    coords.push(k as f64 * h[2]);
                }
            }
        }
        let id = |i: usize, j: usize, k: usize| i + np[0] * (j + np[1] * k);
        const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        for k in 0..resolution[2] {
            for j in 0..resolution[1] {
                for i in 0..resolution[0] {
                    for perm in PERMS {
                        let mut corner = [i, j, k];
                        cells.push(id(corner[0], corner[1], corner[2]));
                        for axis in perm {
                            corner[axis] += 1;
                            cells.push(id(corner[0], corner[1], corner[2]));
                        }
                    }
                }
            }
        }
    }
    Mesh::new(dim, coords, cells, vec![Tissue::None; nv])
}

/// Replaces every vertex label with the labeler's verdict at that vertex.
pub fn assign_labels(mesh: &Mesh, labeler: impl Fn(&[f64]) -> Tissue) -> Mesh {
    let labels = (0..mesh.n_vertices()).map(|i| labeler(mesh.vertex(i))).collect();
    Mesh { labels, ..mesh.clone() }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MeshHeader {
    dim: usize,
    n_vertices: usize,
    n_cells: usize,
    label_names: Vec<String>,
}

/// Path of the binary sidecar belonging to a `.twmesh` / `.twimg` header.
pub(crate) fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

/// Writes `path` (JSON header) and `path.bin` (little-endian payload).
pub fn save_mesh(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = MeshHeader {
        dim: mesh.dim,
        n_vertices: mesh.n_vertices(),
        n_cells: mesh.n_cells(),
        label_names: Tissue::NAMES.iter().map(|s| s.to_string()).collect(),
    };
    fs::write(path, serde_json::to_string_pretty(&header)?)?;
    let mut bytes = Vec::with_capacity(mesh.coords.len() * 8 + mesh.cells.len() * 4 + mesh.labels.len());
    for x in &mesh.coords {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    for &c in &mesh.cells {
        let c = i32::try_from(c).map_err(|_| Error::format("cells", "index exceeds int32 range"))?;
        bytes.extend_from_slice(&c.to_le_bytes());
    }
    bytes.extend(mesh.labels.iter().map(|t| t.code()));
    fs::write(sidecar_path(path), bytes)?;
    Ok(())
}

/// Reads a mesh written by [`save_mesh`].
pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let header: MeshHeader =
        serde_json::from_str(&text).map_err(|e| Error::format("header", e.to_string()))?;
    if header.dim != 2 && header.dim != 3 {
        return Err(Error::format("dim", format!("expected 2 or 3, found {}", header.dim)));
    }
    let names: Vec<Tissue> = header
        .label_names
        .iter()
        .map(|n| Tissue::from_name(n).ok_or_else(|| Error::format("label_names", format!("unknown label `{n}`"))))
        .collect::<Result<_>>()?;
    let bytes = fs::read(sidecar_path(path))?;
    let (nv, nc, dim) = (header.n_vertices, header.n_cells, header.dim);
    let expected = nv * dim * 8 + nc * (dim + 1) * 4 + nv;
    if bytes.len() != expected {
        return Err(Error::format(
            "binary",
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let (coord_bytes, rest) = bytes.split_at(nv * dim * 8);
    let (cell_bytes, label_bytes) = rest.split_at(nc * (dim + 1) * 4);
    let coords: Vec<f64> = coord_bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let mut cells = Vec::with_capacity(nc * (dim + 1));
    for b in cell_bytes.chunks_exact(4) {
        let c = i32::from_le_bytes(b.try_into().unwrap());
        if c < 0 || c as usize >= nv {
            return Err(Error::format("cells", format!("vertex index {c} out of range 0..{nv}")));
        }
        cells.push(c as usize);
    }
    let labels = label_bytes
        .iter()
        .map(|&b| {
            names
                .get(b as usize)
                .copied()
                .ok_or_else(|| Error::format("labels", format!("label code {b} has no name")))
        })
        .collect::<Result<_>>()?;
    Mesh::new(dim, coords, cells, labels).map_err(|e| Error::format("mesh", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_square() {
        let m = generate_structured(&[1.0, 1.0], &[1, 1], 2).unwrap();
        assert_eq!(m.n_vertices(), 4);
        assert_eq!(m.n_cells(), 2);
        assert!(m.labels().iter().all(|&t| t == Tissue::None));
    }

    #[test]
    fn cube_counts_match_counting_oracle() {
        for n in 1..=3 {
            let m = generate_structured(&[100.0; 3], &[n; 3], 3).unwrap();
            assert_eq!(m.n_vertices(), (n + 1).pow(3));
            assert_eq!(m.n_cells(), 6 * n.pow(3));
            // Boundary: each of 6 faces has n^2 squares, 2 triangles each.
            assert_eq!(m.n_boundary_facets(), 12 * n * n);
        }
    }

    #[test]
    fn one_dimensional_rejected() {
        assert!(matches!(generate_structured(&[1.0], &[1], 1), Err(Error::InvalidArgument(_))));
        assert!(generate_structured(&[0.0, 1.0], &[1, 1], 2).is_err());
        assert!(generate_structured(&[1.0, 1.0], &[0, 1], 2).is_err());
    }

    #[test]
    fn volumes_positive_and_sum_to_box() {
        let m2 = generate_structured(&[3.0, 2.0], &[5, 4], 2).unwrap();
        let total: f64 = (0..m2.n_cells()).map(|c| m2.signed_volume(c)).sum();
        assert!((0..m2.n_cells()).all(|c| m2.signed_volume(c) > 0.0));
        assert!((total - 6.0).abs() < 1e-12 * 6.0);
        let m3 = generate_structured(&[1.0, 2.0, 3.0], &[2, 3, 2], 3).unwrap();
        let total: f64 = (0..m3.n_cells()).map(|c| m3.signed_volume(c)).sum();
        assert!((0..m3.n_cells()).all(|c| m3.signed_volume(c) > 0.0));
        assert!((total - 6.0).abs() < 1e-12 * 6.0);
    }

    #[test]
    fn boundary_facets_2d_count() {
        for n in 1..6 {
            let m = generate_structured(&[1.0, 1.0], &[n, n], 2).unwrap();
            assert_eq!(m.n_boundary_facets(), 4 * n);
        }
    }

    #[test]
    fn labels_partition() {
        let m = generate_structured(&[100.0, 100.0], &[10, 10], 2).unwrap();
        let all_white = assign_labels(&m, |_| Tissue::White);
        assert!(all_white.labels().iter().all(|&t| t == Tissue::White));
        let split = assign_labels(&m, |x| if x[0] < 50.0 { Tissue::Gray } else { Tissue::White });
        let g = split.labels().iter().filter(|&&t| t == Tissue::Gray).count();
        let w = split.labels().iter().filter(|&&t| t == Tissue::White).count();
        assert_eq!(g + w, m.n_vertices());
        assert_eq!(split.coords(), m.coords());
    }

    #[test]
    fn disk_labels_match_pointwise_test() {
        let m = generate_structured(&[10.0, 10.0], &[10, 10], 2).unwrap();
        let inside = |x: &[f64]| (x[0] - 5.0).powi(2) + (x[1] - 5.0).powi(2) < 9.0;
        let labeled = assign_labels(&m, |x| if inside(x) { Tissue::White } else { Tissue::Gray });
        let mut expected = 0;
        for j in 0..=10 {
            for i in 0..=10 {
                if inside(&[i as f64, j as f64]) {
                    expected += 1;
                }
            }
        }
        let got = labeled.labels().iter().filter(|&&t| t == Tissue::White).count();
        assert_eq!(got, expected);
    }

    #[test]
    fn negative_orientation_is_flipped() {
        let m = Mesh::new(2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0], vec![0, 2, 1], vec![Tissue::None; 3]).unwrap();
        assert!(m.signed_volume(0) > 0.0);
    }

    #[test]
    fn orphan_vertex_rejected() {
        let r = Mesh::new(
            2,
            vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 5.0, 5.0],
            vec![0, 1, 2],
            vec![Tissue::None; 4],
        );
        assert!(r.is_err());
    }

    #[test]
    fn round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_structured(&[2.0, 1.0, 1.0], &[2, 1, 1], 3).unwrap();
        let m = assign_labels(&m, |x| if x[0] < 1.0 { Tissue::Gray } else { Tissue::White });
        let p = dir.path().join("a.twmesh");
        save_mesh(&m, &p).unwrap();
        assert_eq!(load_mesh(&p).unwrap(), m);

        // dim = 4 in the header
        let text = fs::read_to_string(&p).unwrap().replace("\"dim\": 3", "\"dim\": 4");
        let bad = dir.path().join("b.twmesh");
        fs::write(&bad, text).unwrap();
        fs::copy(sidecar_path(&p), sidecar_path(&bad)).unwrap();
        match load_mesh(&bad) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "dim"),
            other => panic!("unexpected {other:?}"),
        }

        // cell index out of range
        let mut bytes = fs::read(sidecar_path(&p)).unwrap();
        let off = m.n_vertices() * 3 * 8;
        bytes[off..off + 4].copy_from_slice(&(m.n_vertices() as i32).to_le_bytes());
        let c = dir.path().join("c.twmesh");
        fs::copy(&p, &c).unwrap();
        fs::write(sidecar_path(&c), &bytes).unwrap();
        match load_mesh(&c) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "cells"),
            other => panic!("unexpected {other:?}"),
        }

        // truncated payload
        bytes.truncate(bytes.len() - 3);
        fs::write(sidecar_path(&c), &bytes).unwrap();
        match load_mesh(&c) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "binary"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
