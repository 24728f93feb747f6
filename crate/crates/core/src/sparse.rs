//! Symmetric sparse matrices in skyline (variable-band profile) storage with
//! an in-place Cholesky factorization.
//!
//! Columns whose degree is large relative to the dimension are deferred to
//! the tail of the elimination order, which keeps the profile of banded
//! blocks intact when a few rows couple to almost everything. For the joint
//! pose/map normal equations this orders the grid nodes first (banded
//! profile) and the pose columns last (dense tail), so the factorization
//! fills only inside the stored profile.

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SparseError {
    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("entry ({i}, {j}) outside the stored profile")]
    OutsideProfile { i: usize, j: usize },
    #[error("dimension mismatch: matrix is {n}, vector is {len}")]
    DimensionMismatch { n: usize, len: usize },
}

/// Symmetric profile: for each permuted row, the first stored column.
/// Shared between matrices with the same structure.
#[derive(Debug, Clone, PartialEq)]
pub struct SymPattern {
    n: usize,
    /// External index -> permuted index.
    perm: Vec<usize>,
    /// Permuted index -> external index.
    iperm: Vec<usize>,
    /// First stored column of each permuted row (start <= row).
    row_start: Vec<usize>,
    /// Prefix offsets into the value array; row r spans
    /// `offsets[r] .. offsets[r] + (r - row_start[r] + 1)`.
    offsets: Vec<usize>,
    nnz: usize,
}

impl SymPattern {
    /// Builds a pattern from undirected coupling pairs (each pair listed in
    /// either orientation; duplicates are fine). Diagonal entries are always
    /// stored.
    pub fn from_edges(n: usize, edges: impl Iterator<Item = (usize, usize)> + Clone) -> Self {
        let mut degree = vec![0usize; n];
        for (i, j) in edges.clone() {
            if i != j {
                degree[i] += 1;
                degree[j] += 1;
            }
        }
        // Defer near-dense columns to the tail, keeping the given order
        // otherwise (stable partition).
        let threshold = (n / 4).max(32);
        let mut order: Vec<usize> = (0..n).filter(|&i| degree[i] < threshold).collect();
        order.extend((0..n).filter(|&i| degree[i] >= threshold));
        let mut perm = vec![0usize; n];
        for (pos, &ext) in order.iter().enumerate() {
            perm[ext] = pos;
        }
        let mut row_start: Vec<usize> = (0..n).collect();
        for (i, j) in edges {
            let (pi, pj) = (perm[i], perm[j]);
            let (r, c) = if pi >= pj { (pi, pj) } else { (pj, pi) };
            row_start[r] = row_start[r].min(c);
        }
        Self::from_parts(perm, order, row_start)
    }

    /// Builds a pattern directly from permuted row starts. `order[k]` is the
    /// external index eliminated at position `k`.
    pub fn from_parts(perm: Vec<usize>, iperm: Vec<usize>, row_start: Vec<usize>) -> Self {
        let n = perm.len();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut nnz = 0usize;
        for (r, &s) in row_start.iter().enumerate() {
            debug_assert!(s <= r);
            offsets.push(nnz);
            nnz += r - s + 1;
        }
        offsets.push(nnz);
        Self {
            n,
            perm,
            iperm,
            row_start,
            offsets,
            nnz,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.nnz
    }
}

/// Symmetric matrix stored on a shared [`SymPattern`]. Only the lower
/// triangle of the permuted form is kept.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymMatrix {
    pattern: std::sync::Arc<SymPattern>,
    vals: Vec<f64>,
}

impl SparseSymMatrix {
    pub fn zeros(pattern: std::sync::Arc<SymPattern>) -> Self {
        let nnz = pattern.nnz();
        Self {
            pattern,
            vals: vec![0.0; nnz],
        }
    }

    /// Builds a matrix from symmetric triplets: each off-diagonal pair given
    /// once (either orientation), duplicates accumulate.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let pattern = SymPattern::from_edges(n, triplets.iter().map(|&(i, j, _)| (i, j)));
        let mut m = Self::zeros(std::sync::Arc::new(pattern));
        for &(i, j, v) in triplets {
            m.add(i, j, v);
        }
        m
    }

    pub fn pattern(&self) -> &std::sync::Arc<SymPattern> {
        &self.pattern
    }

    pub fn dim(&self) -> usize {
        self.pattern.n
    }

    pub fn set_zero(&mut self) {
        self.vals.iter_mut().for_each(|v| *v = 0.0);
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        let p = &self.pattern;
        let (pi, pj) = (p.perm[i], p.perm[j]);
        let (r, c) = if pi >= pj { (pi, pj) } else { (pj, pi) };
        debug_assert!(
            c >= p.row_start[r],
            "entry ({i}, {j}) outside stored profile"
        );
        p.offsets[r] + (c - p.row_start[r])
    }

    /// Accumulates `v` at the symmetric entry `(i, j)`.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j);
        self.vals[s] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.vals[self.slot(i, j)]
    }

    pub fn add_to_diagonal(&mut self, v: f64) {
        for i in 0..self.pattern.n {
            let s = self.slot(i, i);
            self.vals[s] += v;
        }
    }

    /// `y = M x` over the full symmetric matrix (both triangles).
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let p = &self.pattern;
        let n = p.n;
        assert_eq!(x.len(), n);
        let mut y_perm = vec![0.0; n];
        let x_perm: Vec<f64> = (0..n).map(|r| x[p.iperm[r]]).collect();
        for r in 0..n {
            let s = p.row_start[r];
            let row = &self.vals[p.offsets[r]..p.offsets[r + 1]];
            let mut acc = 0.0;
            for (k, &v) in row.iter().enumerate() {
                let c = s + k;
                acc += v * x_perm[c];
                if c != r {
                    y_perm[c] += v * x_perm[r];
                }
            }
            y_perm[r] += acc;
        }
        let mut y = vec![0.0; n];
        for r in 0..n {
            y[p.iperm[r]] = y_perm[r];
        }
        y
    }

    /// In-place-style Cholesky `M = L L^T` over the stored profile.
    pub fn factor(&self) -> Result<CholeskyFactor, SparseError> {
        let p = &self.pattern;
        let n = p.n;
        let mut l = self.vals.clone();
        for r in 0..n {
            let (head, tail) = l.split_at_mut(p.offsets[r]);
            let row = &mut tail[..r - p.row_start[r] + 1];
            let sr = p.row_start[r];
            for j in sr..r {
                let sj = p.row_start[j];
                let k0 = sr.max(sj);
                let prow = &head[p.offsets[j]..p.offsets[j + 1]];
                // dot over the overlap of rows r and j, columns k0..j
                let a = &row[(k0 - sr)..(j - sr)];
                let b = &prow[(k0 - sj)..(j - sj)];
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let diag_j = prow[j - sj];
                row[j - sr] = (row[j - sr] - dot) / diag_j;
            }
            let sq: f64 = row[..r - sr].iter().map(|v| v * v).sum();
            let d = row[r - sr] - sq;
            if d <= 0.0 || !d.is_finite() {
                return Err(SparseError::NotPositiveDefinite { row: r, pivot: d });
            }
            row[r - sr] = d.sqrt();
        }
        Ok(CholeskyFactor {
            pattern: self.pattern.clone(),
            l,
        })
    }
}

/// Lower-triangular Cholesky factor on the matrix's profile.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    pattern: std::sync::Arc<SymPattern>,
    l: Vec<f64>,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.pattern.n
    }

    fn forward(&self, b: &mut [f64]) {
        let p = &self.pattern;
        for r in 0..p.n {
            let sr = p.row_start[r];
            let row = &self.l[p.offsets[r]..p.offsets[r + 1]];
            let dot: f64 = row[..r - sr]
                .iter()
                .zip(&b[sr..r])
                .map(|(x, y)| x * y)
                .sum();
            b[r] = (b[r] - dot) / row[r - sr];
        }
    }

    fn backward(&self, b: &mut [f64]) {
        let p = &self.pattern;
        for r in (0..p.n).rev() {
            let sr = p.row_start[r];
            let row = &self.l[p.offsets[r]..p.offsets[r + 1]];
            let xr = b[r] / row[r - sr];
            b[r] = xr;
            for (k, &v) in row[..r - sr].iter().enumerate() {
                b[sr + k] -= v * xr;
            }
        }
    }

    /// Solves `M x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, SparseError> {
        let p = &self.pattern;
        if b.len() != p.n {
            return Err(SparseError::DimensionMismatch {
                n: p.n,
                len: b.len(),
            });
        }
        let mut w: Vec<f64> = (0..p.n).map(|r| b[p.iperm[r]]).collect();
        self.forward(&mut w);
        self.backward(&mut w);
        let mut x = vec![0.0; p.n];
        for r in 0..p.n {
            x[p.iperm[r]] = w[r];
        }
        Ok(x)
    }

    /// `(M^-1)_{ii}` for external index `i`, as the squared norm of the
    /// forward-solved unit vector; non-negative by construction.
    pub fn inverse_diagonal_entry(&self, i: usize) -> f64 {
        let p = &self.pattern;
        let mut w = vec![0.0; p.n];
        w[p.perm[i]] = 1.0;
        self.forward_from(&mut w, p.perm[i]);
        w.iter().map(|v| v * v).sum()
    }

    /// Dense block of the inverse at external indices `idx` (Gram matrix of
    /// forward-solved unit vectors), symmetric positive semidefinite.
    pub fn inverse_block(&self, idx: &[usize]) -> Vec<Vec<f64>> {
        let p = &self.pattern;
        let cols: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| {
                let mut w = vec![0.0; p.n];
                w[p.perm[i]] = 1.0;
                self.forward_from(&mut w, p.perm[i]);
                w
            })
            .collect();
        let k = idx.len();
        let mut out = vec![vec![0.0; k]; k];
        for a in 0..k {
            for b in a..k {
                let dot: f64 = cols[a].iter().zip(&cols[b]).map(|(x, y)| x * y).sum();
                out[a][b] = dot;
                out[b][a] = dot;
            }
        }
        out
    }

    /// All inverse diagonal entries, in external index order.
    pub fn inverse_diagonal(&self) -> Vec<f64> {
        (0..self.pattern.n)
            .into_par_iter()
            .map(|i| self.inverse_diagonal_entry(i))
            .collect()
    }

    /// Forward solve knowing `b` is zero before permuted row `first`.
    fn forward_from(&self, b: &mut [f64], first: usize) {
        let p = &self.pattern;
        for r in first..p.n {
            let sr = p.row_start[r];
            let lo = sr.max(first);
            let row = &self.l[p.offsets[r]..p.offsets[r + 1]];
            let dot: f64 = row[(lo - sr)..(r - sr)]
                .iter()
                .zip(&b[lo..r])
                .map(|(x, y)| x * y)
                .sum();
            b[r] = (b[r] - dot) / row[r - sr];
        }
    }
}

/// Solves the symmetric positive definite system `m x = rhs` by sparse
/// Cholesky under the pattern's fill-reducing ordering. Errors if the matrix
/// is not positive definite.
pub fn solve_linear(m: &SparseSymMatrix, rhs: &[f64]) -> Result<Vec<f64>, SparseError> {
    m.factor()?.solve(rhs)
}

/// Like [`solve_linear`], but on factorization failure retries with ten times
/// more diagonal regularization, up to five times starting from `base_reg`.
/// Returns the solution and the extra regularization that was applied.
pub fn solve_linear_regularized(
    m: &SparseSymMatrix,
    rhs: &[f64],
    base_reg: f64,
) -> Result<(Vec<f64>, f64), SparseError> {
    if let Ok(f) = m.factor() {
        return f.solve(rhs).map(|x| (x, 0.0));
    }
    let mut extra = 10.0 * base_reg;
    let mut last_err = SparseError::NotPositiveDefinite { row: 0, pivot: 0.0 };
    for _ in 0..5 {
        let mut bumped = m.clone();
        bumped.add_to_diagonal(extra);
        match bumped.factor() {
            Ok(f) => return f.solve(rhs).map(|x| (x, extra)),
            Err(e) => last_err = e,
        }
        extra *= 10.0;
    }
    Err(last_err)
}
