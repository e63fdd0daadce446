//! Voxel images, imaging-derived fields, and observation manifests.
//!
//! Images are stored as a JSON header (`.twimg`) plus a raw little-endian
//! `f32` payload next to it (`.twimg.bin`), x-fastest. The origin is the
//! center of the first voxel. Values are kept as `f32` in memory so that a
//! save/load cycle is bit-exact; `NaN` marks voxels without data.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::FemSpace;
use crate::forward::ObservationSet;
use crate::mesh::sidecar_path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageGeometry {
    pub dims: Vec<usize>,
    pub spacing_mm: Vec<f64>,
    pub origin_mm: Vec<f64>,
}

impl ImageGeometry {
    pub fn new(dims: Vec<usize>, spacing_mm: Vec<f64>, origin_mm: Vec<f64>) -> Result<Self> {
        let g = ImageGeometry { dims, spacing_mm, origin_mm };
        g.validate()?;
        Ok(g)
    }

    /// Voxels of size `extent / dims` tiling the box `[0, extent]`.
    pub fn covering_box(extent: &[f64], dims: &[usize]) -> Result<Self> {
        if extent.len() != dims.len() || dims.contains(&0) {
            return Err(Error::invalid("extent and dims must have equal length and dims must be positive"));
        }
        let spacing: Vec<f64> = extent.iter().zip(dims).map(|(e, n)| e / *n as f64).collect();
        let origin = spacing.iter().map(|h| 0.5 * h).collect();
        ImageGeometry::new(dims.to_vec(), spacing, origin)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims.len();
        if !(2..=3).contains(&d) {
            return Err(Error::format("dims", format!("expected 2 or 3 axes, found {d}")));
        }
        if self.spacing_mm.len() != d || self.origin_mm.len() != d {
            return Err(Error::format("spacing_mm", "spacing and origin must match dims"));
        }
        if self.dims.contains(&0) {
            return Err(Error::format("dims", "all dimensions must be positive"));
        }
        if self.spacing_mm.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
            return Err(Error::format("spacing_mm", "spacing must be positive"));
        }
        if self.origin_mm.iter().any(|o| !o.is_finite()) {
            return Err(Error::format("origin_mm", "origin must be finite"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Flat index of a multi-index, x fastest.
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().rev().zip(self.dims.iter().rev()).fold(0, |acc, (i, n)| acc * n + i)
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        self.dims
            .iter()
            .map(|n| {
                let i = flat % n;
                flat /= n;
                i
            })
            .collect()
    }

    pub fn center(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .enumerate()
            .map(|(k, i)| self.origin_mm[k] + *i as f64 * self.spacing_mm[k])
            .collect()
    }

    /// All voxel centers, flattened.
    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_voxels()).flat_map(|i| self.center(i)).collect()
    }

    /// Physical extent covered by the voxels, `(lo, hi)` per axis.
    pub fn extent(&self) -> (Vec<f64>, Vec<f64>) {
        let lo = self.origin_mm.iter().zip(&self.spacing_mm).map(|(o, h)| o - 0.5 * h).collect();
        let hi = (0..self.dim())
            .map(|k| self.origin_mm[k] + (self.dims[k] as f64 - 0.5) * self.spacing_mm[k])
            .collect();
        (lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelImage {
    pub geometry: ImageGeometry,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageHeader {
    dims: Vec<usize>,
    spacing_mm: Vec<f64>,
    origin_mm: Vec<f64>,
    dtype: String,
}

impl VoxelImage {
    pub fn new(geometry: ImageGeometry, data: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.n_voxels() {
            return Err(Error::format("data", format!("expected {} values, found {}", geometry.n_voxels(), data.len())));
        }
        Ok(VoxelImage { geometry, data })
    }

    pub fn from_fn(geometry: ImageGeometry, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let data = (0..geometry.n_voxels()).map(|i| f(&geometry.center(i)) as f32).collect();
        VoxelImage::new(geometry, data)
    }

    pub fn zeros(geometry: ImageGeometry) -> Result<Self> {
        let n = geometry.n_voxels();
        VoxelImage::new(geometry, vec![0.0; n])
    }

    pub fn value(&self, flat: usize) -> f64 {
        self.data[flat] as f64
    }

    pub fn values(&self) -> Vec<f64> {
        self.data.iter().map(|v| *v as f64).collect()
    }

    /// Writes `path` and its `.bin` sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = ImageHeader {
            dims: self.geometry.dims.clone(),
            spacing_mm: self.geometry.spacing_mm.clone(),
            origin_mm: self.geometry.origin_mm.clone(),
            dtype: "f32le".into(),
        };
        fs::write(path, serde_json::to_string_pretty(&header)?)?;
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(sidecar_path(path), bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let header: ImageHeader = serde_json::from_str(&text).map_err(|e| Error::format("header", e.to_string()))?;
        if header.dtype != "f32le" {
            return Err(Error::format("dtype", format!("unsupported dtype `{}`", header.dtype)));
        }
        let geometry = ImageGeometry::new(header.dims, header.spacing_mm, header.origin_mm)?;
        let bytes = fs::read(sidecar_path(path))?;
        if bytes.len() != 4 * geometry.n_voxels() {
            return Err(Error::format(
                "binary",
                format!("expected {} bytes, found {}", 4 * geometry.n_voxels(), bytes.len()),
            ));
        }
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        VoxelImage::new(geometry, data)
    }

    /// Multilinear interpolation at `x`. Inside the voxel extent but outside
    /// the hull of voxel centers the edge cell is extended linearly; beyond
    /// the extent the value at the extent boundary is used.
    pub fn sample(&self, x: &[f64]) -> f64 {
        let g = &self.geometry;
        let d = g.dim();
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for k in 0..d {
            let n = g.dims[k];
            let s = ((x[k] - g.origin_mm[k]) / g.spacing_mm[k]).clamp(-0.5, n as f64 - 0.5);
            if n == 1 {
                base[k] = 0;
                frac[k] = 0.0;
                continue;
            }
            let i = (s.floor().max(0.0) as usize).min(n - 2);
            base[k] = i;
            frac[k] = s - i as f64;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = base.clone();
            for k in 0..d {
                let up = (corner >> k) & 1 == 1;
                if g.dims[k] == 1 {
                    if up {
                        w = 0.0;
                    }
                    continue;
                }
                if up {
                    idx[k] += 1;
                    w *= frac[k];
                } else {
                    w *= 1.0 - frac[k];
                }
            }
            if w != 0.0 {
                acc += w * self.value(g.flat_index(&idx));
            }
        }
        acc
    }
}

fn same_geometry(a: &VoxelImage, b: &VoxelImage) -> Result<()> {
    if a.geometry != b.geometry {
        return Err(Error::invalid("images have different geometry"));
    }
    Ok(())
}

/// Tumor cellularity from apparent diffusion coefficient:
/// `d = (ADC_w − ADC) / (ADC_w − ADC_min)` inside the mask, zero outside,
/// where `ADC_min` is the mask minimum. Negative values are clamped to zero;
/// the number of clamped voxels is returned alongside the image.
pub fn adc_to_cellularity(adc: &VoxelImage, adc_w: f64, roi: &VoxelImage) -> Result<(VoxelImage, usize)> {
    same_geometry(adc, roi)?;
    let inside: Vec<bool> = roi.data.iter().map(|m| *m > 0.5).collect();
    let adc_min = adc
        .data
        .iter()
        .zip(&inside)
        .filter(|(_, m)| **m)
        .map(|(v, _)| *v as f64)
        .fold(f64::INFINITY, f64::min);
    if !adc_min.is_finite() {
        return Err(Error::invalid("region of interest is empty"));
    }
    if !(adc_w > adc_min) {
        return Err(Error::Degenerate(format!("free-water ADC {adc_w} does not exceed the minimum {adc_min}")));
    }
    let mut clamped = 0;
    let data = adc
        .data
        .iter()
        .zip(&inside)
        .map(|(v, m)| {
            if !m {
                return 0.0;
            }
            let d = (adc_w - *v as f64) / (adc_w - adc_min);
            if d < 0.0 {
                clamped += 1;
                0.0
            } else {
                d as f32
            }
        })
        .collect();
    if clamped > 0 {
        log::warn!("{clamped} voxels had ADC above the free-water value and were clamped to zero");
    }
    Ok((VoxelImage::new(adc.geometry.clone(), data)?, clamped))
}

/// Initial cellularity from tumor segmentations: 0.8 in the enhancing
/// region, 0.16 in the non-enhancing region, zero elsewhere. Enhancing wins
/// where the masks overlap.
pub fn seed_from_segmentation(enhancing: &VoxelImage, non_enhancing: &VoxelImage) -> Result<VoxelImage> {
    same_geometry(enhancing, non_enhancing)?;
    let data = enhancing
        .data
        .iter()
        .zip(&non_enhancing.data)
        .map(|(e, n)| if *e > 0.5 { 0.8 } else if *n > 0.5 { 0.16 } else { 0.0 })
        .collect();
    VoxelImage::new(enhancing.geometry.clone(), data)
}

/// Tumor region of a noisy cellularity map by hysteresis thresholding:
/// voxels above `high`, plus voxels above `low` connected to them through
/// faces, keep their values; the rest is set to zero. Forecasts start from
/// such a map, since background noise left in place grows logistically and
/// seeds tumor everywhere. `NaN` voxels become zero.
pub fn suppress_background(img: &VoxelImage, low: f64, high: f64) -> Result<VoxelImage> {
    if !(low >= 0.0 && low <= high && high < 1.0) {
        return Err(Error::invalid(format!("background thresholds need 0 <= low <= high < 1, got {low} and {high}")));
    }
    let g = &img.geometry;
    let above = |k: usize, t: f64| f64::from(img.data[k]) > t;
    let mut keep: Vec<bool> = (0..g.n_voxels()).map(|k| above(k, high)).collect();
    let mut queue: std::collections::VecDeque<usize> = (0..g.n_voxels()).filter(|&k| keep[k]).collect();
    while let Some(k) = queue.pop_front() {
        let idx = g.multi_index(k);
        for axis in 0..g.dim() {
            for up in [false, true] {
                let mut nb = idx.clone();
                match (up, idx[axis]) {
                    (false, 0) => continue,
                    (false, i) => nb[axis] = i - 1,
                    (true, i) if i + 1 == g.dims[axis] => continue,
                    (true, i) => nb[axis] = i + 1,
                }
                let m = g.flat_index(&nb);
                if !keep[m] && above(m, low) {
                    keep[m] = true;
                    queue.push_back(m);
                }
            }
        }
    }
    let data = img.data.iter().zip(&keep).map(|(v, k)| if *k { *v } else { 0.0 }).collect();
    VoxelImage::new(g.clone(), data)
}

fn check_overlap(img: &VoxelImage, space: &FemSpace) -> Result<()> {
    let (lo, hi) = img.geometry.extent();
    let (mlo, mhi) = space.mesh().bounding_box();
    if lo.len() != mlo.len() {
        return Err(Error::invalid("image and mesh dimensions differ"));
    }
    for k in 0..lo.len() {
        if hi[k] <= mlo[k] || mhi[k] <= lo[k] {
            return Err(Error::invalid("image and mesh do not overlap"));
        }
    }
    Ok(())
}

/// Samples an image at the mesh vertices. With `clamp_unit` the result is
/// limited to `[0, 1]`, as appropriate for cellularity.
pub fn voxel_to_field(img: &VoxelImage, space: &FemSpace, clamp_unit: bool) -> Result<Vec<f64>> {
    check_overlap(img, space)?;
    let mesh = space.mesh();
    Ok((0..mesh.n_vertices())
        .map(|i| {
            let v = img.sample(mesh.vertex(i));
            if clamp_unit {
                v.clamp(0.0, 1.0)
            } else {
                v
            }
        })
        .collect())
}

/// Evaluates a nodal field at voxel centers; voxels outside the mesh get `NaN`.
pub fn field_to_voxel(field: &[f64], space: &FemSpace, geometry: &ImageGeometry) -> Result<VoxelImage> {
    if field.len() != space.n_vertices() {
        return Err(Error::invalid("field length does not match the mesh"));
    }
    if geometry.dim() != space.mesh().dim() {
        return Err(Error::invalid("image and mesh dimensions differ"));
    }
    let centers = geometry.centers();
    let inside = space.contains_points(&centers);
    if !inside.iter().any(|b| *b) {
        return Err(Error::invalid("image and mesh do not overlap"));
    }
    let d = geometry.dim();
    let pts: Vec<f64> = centers.chunks_exact(d).zip(&inside).filter(|(_, b)| **b).flat_map(|(x, _)| x.to_vec()).collect();
    let vals = space.interpolator(&pts)?.apply(field);
    let mut it = vals.into_iter();
    let data = inside.iter().map(|b| if *b { it.next().unwrap() as f32 } else { f32::NAN }).collect();
    VoxelImage::new(geometry.clone(), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub t_days: f64,
    /// Path relative to the manifest file.
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationManifest {
    pub noise_variance: f64,
    pub observations: Vec<ManifestEntry>,
}

impl ObservationManifest {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_variance.is_finite() && self.noise_variance > 0.0) {
            return Err(Error::format("noise_variance", "must be positive"));
        }
        if self.observations.windows(2).any(|w| !(w[1].t_days > w[0].t_days)) {
            return Err(Error::format("observations", "times must be strictly increasing"));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())?;
        let m: ObservationManifest =
            serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    fn resolve(base: &Path, image: &str) -> PathBuf {
        let p = Path::new(image);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }

    /// Loads every image, resolving paths against `base_dir`.
    pub fn load_images(&self, base_dir: impl AsRef<Path>) -> Result<Vec<(f64, VoxelImage)>> {
        self.observations
            .iter()
            .map(|e| {
                let path = Self::resolve(base_dir.as_ref(), &e.image);
                let img = VoxelImage::load(&path).map_err(|err| match err {
                    Error::Io(io) => Error::format(path.display().to_string(), io.to_string()),
                    other => other,
                })?;
                Ok((e.t_days, img))
            })
            .collect()
    }
}

/// Observation set on the voxel centers that lie inside the mesh and carry
/// finite data at every time. All images must share one geometry.
pub fn observations_from_images(images: &[(f64, VoxelImage)], space: &FemSpace, noise_variance: f64) -> Result<ObservationSet> {
    let Some((_, first)) = images.first() else {
        return Ok(ObservationSet::empty(space.mesh().dim()));
    };
    if images.iter().any(|(_, img)| img.geometry != first.geometry) {
        return Err(Error::invalid("observation images have different geometry"));
    }
    let g = &first.geometry;
    let centers = g.centers();
    let inside = space.contains_points(&centers);
    let keep: Vec<usize> = (0..g.n_voxels())
        .filter(|&i| inside[i] && images.iter().all(|(_, img)| img.data[i].is_finite()))
        .collect();
    let d = g.dim();
    let points: Vec<f64> = keep.iter().flat_map(|&i| centers[i * d..(i + 1) * d].to_vec()).collect();
    let data = images.iter().map(|(_, img)| keep.iter().map(|&i| img.value(i)).collect()).collect();
    let times = images.iter().map(|(t, _)| *t).collect();
    ObservationSet::new(times, points, d, data, noise_variance)
}
