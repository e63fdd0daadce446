//! Compressed-row sparse matrices and a direct solver for the symmetric
//! systems that arise from P1 assembly.
//!
//! The solver is an envelope (skyline) `LDLᵀ` factorization applied after a
//! reverse Cuthill–McKee reordering. For the desk-scale meshes this crate
//! targets the envelope stays narrow, and a direct factorization lets the
//! adjoint and incremental sweeps reuse the forward Jacobians exactly.

use crate::error::{Error, Result};

/// Square sparse matrix in compressed-row storage.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets, summing duplicates.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(i, j, v) in triplets {
            rows[i].push((j, v));
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            for (j, v) in row {
                if col_idx.len() > *row_ptr.last().unwrap() && *col_idx.last().unwrap() == j {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix { n, row_ptr, col_idx, values }
    }

    /// A matrix with the given pattern and all-zero values.
    pub fn zeros_with_pattern(n: usize, row_ptr: Vec<usize>, col_idx: Vec<usize>) -> Self {
        let nnz = col_idx.len();
        CsrMatrix { n, row_ptr, col_idx, values: vec![0.0; nnz] }
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let n = d.len();
        CsrMatrix {
            n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: d.to_vec(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    /// Entry `(i, j)`, zero when outside the pattern.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[r.clone()].binary_search(&j) {
            Ok(k) => self.values[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.values[k] * x[self.col_idx[k]];
            }
            *yi = s;
        }
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut trip = Vec::with_capacity(self.nnz());
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                trip.push((j, i, v));
            }
        }
        CsrMatrix::from_triplets(self.n, &trip)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// `‖A − Aᵀ‖_max`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// `self + alpha * other`; both must share one pattern.
    pub fn add_scaled(&self, alpha: f64, other: &CsrMatrix) -> CsrMatrix {
        assert!(self.same_pattern(other), "add_scaled requires identical sparsity patterns");
        let mut out = self.clone();
        for (a, b) in out.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        out
    }

    pub fn scaled(&self, alpha: f64) -> CsrMatrix {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    pub fn same_pattern(&self, other: &CsrMatrix) -> bool {
        self.n == other.n && self.row_ptr == other.row_ptr && self.col_idx == other.col_idx
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut d = nalgebra::DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                d[(i, j)] += v;
            }
        }
        d
    }
}

/// Symmetric fill-reducing ordering plus the envelope it induces.
#[derive(Debug, Clone)]
pub struct EnvelopeOrdering {
    /// `perm[new] = old`
    perm: Vec<usize>,
    /// `inv[old] = new`
    inv: Vec<usize>,
    /// First column of the lower envelope of each (permuted) row.
    first: Vec<usize>,
    /// Offset of each row in the packed envelope storage.
    offset: Vec<usize>,
}

impl EnvelopeOrdering {
    /// Reverse Cuthill–McKee ordering of the symmetric pattern of `a`.
    pub fn reverse_cuthill_mckee(a: &CsrMatrix) -> Self {
        let n = a.n();
        let degree: Vec<usize> = (0..n).map(|i| a.row_ptr[i + 1] - a.row_ptr[i]).collect();
        let mut visited = vec![false; n];
        let mut order = Vec::with_capacity(n);
        while order.len() < n {
            let start = (0..n)
                .filter(|&i| !visited[i])
                .min_by_key(|&i| degree[i])
                .expect("unvisited vertex exists");
            let start = pseudo_peripheral(a, start);
            visited[start] = true;
            let mut head = order.len();
            order.push(start);
            while head < order.len() {
                let v = order[head];
                head += 1;
                let mut nbrs: Vec<usize> = a.row(v).map(|(j, _)| j).filter(|&j| !visited[j]).collect();
                nbrs.sort_by_key(|&j| (degree[j], j));
                for j in nbrs {
                    if !visited[j] {
                        visited[j] = true;
                        order.push(j);
                    }
                }
            }
        }
        order.reverse();
        Self::from_permutation(a, order)
    }

    fn from_permutation(a: &CsrMatrix, perm: Vec<usize>) -> Self {
        let n = a.n();
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for old in 0..n {
            let i = inv[old];
            for (j_old, _) in a.row(old) {
                let j = inv[j_old];
                if j < i {
                    first[i] = first[i].min(j);
                } else if i < j {
                    first[j] = first[j].min(i);
                }
            }
        }
        let mut offset = Vec::with_capacity(n + 1);
        offset.push(0);
        for i in 0..n {
            offset.push(offset[i] + (i - first[i] + 1));
        }
        EnvelopeOrdering { perm, inv, first, offset }
    }

    /// Stored entries of the lower envelope including the diagonal.
    pub fn envelope_size(&self) -> usize {
        *self.offset.last().unwrap()
    }
}

fn pseudo_peripheral(a: &CsrMatrix, start: usize) -> usize {
    let mut root = start;
    let mut ecc = 0;
    for _ in 0..8 {
        let (levels, last) = bfs_levels(a, root);
        if levels <= ecc {
            break;
        }
        ecc = levels;
        root = last;
    }
    root
}

fn bfs_levels(a: &CsrMatrix, root: usize) -> (usize, usize) {
    let n = a.n();
    let mut level = vec![usize::MAX; n];
    level[root] = 0;
    let mut queue = std::collections::VecDeque::from([root]);
    let mut last = root;
    while let Some(v) = queue.pop_front() {
        last = v;
        for (j, _) in a.row(v) {
            if level[j] == usize::MAX {
                level[j] = level[v] + 1;
                queue.push_back(j);
            }
        }
    }
    (level[last], last)
}

/// `LDLᵀ` factorization of a symmetric matrix over a fixed envelope.
///
/// No pivoting is performed: the matrices factored here are symmetric
/// positive definite or close enough (mass-dominated Newton Jacobians) that
/// the natural pivots stay well away from zero.
#[derive(Debug, Clone)]
pub struct SymmetricFactor {
    ordering: std::sync::Arc<EnvelopeOrdering>,
    /// Packed rows of `L` (strictly lower part) with `D` on the diagonal slot.
    packed: Vec<f64>,
}

impl SymmetricFactor {
    pub fn factor(a: &CsrMatrix, ordering: &std::sync::Arc<EnvelopeOrdering>) -> Result<Self> {
        let ord = ordering.as_ref();
        let n = a.n();
        if ord.perm.len() != n {
            return Err(Error::Solver("ordering does not match matrix size".into()));
        }
        let mut packed = vec![0.0; ord.envelope_size()];
        let mut scale = 0.0_f64;
        for old in 0..n {
            let i = ord.inv[old];
            for (j_old, v) in a.row(old) {
                let j = ord.inv[j_old];
                if j <= i {
                    packed[ord.offset[i] + j - ord.first[i]] = v;
                }
                scale = scale.max(v.abs());
            }
        }
        if !scale.is_finite() {
            return Err(Error::NonFinite("matrix to factor".into()));
        }
        for i in 0..n {
            let fi = ord.first[i];
            let oi = ord.offset[i];
            for j in fi..i {
                let fj = ord.first[j];
                let oj = ord.offset[j];
                let k0 = fi.max(fj);
                let mut s = packed[oi + j - fi];
                // row_i holds w_ik = l_ik d_k for k < j, row_j holds l_jk
                let ri = &packed[oi + k0 - fi..oi + j - fi];
                let rj = &packed[oj + k0 - fj..oj + j - fj];
                for (x, y) in ri.iter().zip(rj) {
                    s -= x * y;
                }
                packed[oi + j - fi] = s;
            }
            let mut d = packed[oi + i - fi];
            for k in fi..i {
                let w = packed[oi + k - fi];
                let dk = packed[ord.offset[k] + k - ord.first[k]];
                let l = w / dk;
                d -= w * l;
                packed[oi + k - fi] = l;
            }
            if !(d.abs() > 1e-14 * scale) || !d.is_finite() {
                return Err(Error::Solver(format!("zero or invalid pivot {d:e} at row {i}")));
            }
            packed[oi + i - fi] = d;
        }
        Ok(SymmetricFactor { ordering: ordering.clone(), packed })
    }

    pub fn n(&self) -> usize {
        self.ordering.perm.len()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; b.len()];
        self.solve_into(b, &mut x);
        x
    }

    pub fn solve_into(&self, b: &[f64], x: &mut [f64]) {
        let ord = self.ordering.as_ref();
        let n = ord.perm.len();
        let mut y: Vec<f64> = ord.perm.iter().map(|&old| b[old]).collect();
        for i in 0..n {
            let fi = ord.first[i];
            let oi = ord.offset[i];
            let row = &self.packed[oi..oi + i - fi];
            let s: f64 = row.iter().zip(&y[fi..i]).map(|(l, v)| l * v).sum();
            y[i] -= s;
        }
        for i in 0..n {
            y[i] /= self.packed[ord.offset[i] + i - ord.first[i]];
        }
        for i in (0..n).rev() {
            let fi = ord.first[i];
            let oi = ord.offset[i];
            let yi = y[i];
            for (k, l) in self.packed[oi..oi + i - fi].iter().enumerate() {
                y[fi + k] -= l * yi;
            }
        }
        for (new, &old) in ord.perm.iter().enumerate() {
            x[old] = y[new];
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
