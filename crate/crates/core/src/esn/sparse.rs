//! Compressed-sparse-row matrix with the dominant-eigenvalue estimation the
//! reservoir builder needs. The spectral radius is computed by block power
//! iteration (subspace dimension up to 8) so that dominant complex-conjugate
//! eigenvalue pairs, common for random recurrence matrices, are handled.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum SparseError {
    #[error("duplicate entry at ({0}, {1})")]
    DuplicateEntry(usize, usize),
    #[error("entry ({0}, {1}) outside a {2}x{2} matrix")]
    OutOfBounds(usize, usize, usize),
    #[error("inconsistent csr structure: {0}")]
    Malformed(String),
}

/// Square sparse matrix in compressed-row layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Build from (row, col, value) entries. Entries may arrive in any order;
    /// duplicates are rejected.
    pub fn from_entries(
        n: usize,
        mut entries: Vec<(usize, usize, f64)>,
    ) -> Result<Self, SparseError> {
        for &(r, c, _) in &entries {
            if r >= n || c >= n {
                return Err(SparseError::OutOfBounds(r, c, n));
            }
        }
        entries.sort_unstable_by_key(|e| (e.0, e.1));
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(SparseError::DuplicateEntry(w[0].0, w[0].1));
            }
        }
        let mut row_ptr = vec![0usize; n + 1];
        for &(r, _, _) in &entries {
            row_ptr[r + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let col_idx = entries.iter().map(|e| e.1).collect();
        let values = entries.iter().map(|e| e.2).collect();
        Ok(CsrMatrix {
            n,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Structural validation, used after deserializing model files.
    pub fn validate(&self) -> Result<(), SparseError> {
        if self.row_ptr.len() != self.n + 1
            || self.row_ptr[0] != 0
            || *self.row_ptr.last().unwrap() != self.values.len()
            || self.col_idx.len() != self.values.len()
        {
            return Err(SparseError::Malformed("row_ptr/storage mismatch".into()));
        }
        for r in 0..self.n {
            if self.row_ptr[r] > self.row_ptr[r + 1] {
                return Err(SparseError::Malformed(format!(
                    "row {r} has negative extent"
                )));
            }
            let cols = &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]];
            for w in cols.windows(2) {
                if w[0] >= w[1] {
                    return Err(SparseError::Malformed(format!(
                        "row {r} columns not sorted"
                    )));
                }
            }
            if cols.iter().any(|&c| c >= self.n) {
                return Err(SparseError::Malformed(format!(
                    "row {r} column out of range"
                )));
            }
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(SparseError::Malformed("non-finite value".into()));
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// y = A x
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(y.len(), self.n);
        for r in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            y[r] = acc;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    /// True when the nonzero pattern contains no directed cycle (Kahn's
    /// algorithm). An acyclic pattern makes the matrix nilpotent, i.e. its
    /// spectral radius is exactly zero no matter the values — a case numeric
    /// eigenvalue estimates cannot certify, since defective eigenvalues
    /// perturb like eps^(1/k).
    pub fn is_acyclic(&self) -> bool {
        let n = self.n;
        let mut indegree = vec![0usize; n];
        for &c in &self.col_idx {
            indegree[c] += 1;
        }
        let mut queue: Vec<usize> = (0..n).filter(|&v| indegree[v] == 0).collect();
        let mut removed = 0usize;
        while let Some(v) = queue.pop() {
            removed += 1;
            for k in self.row_ptr[v]..self.row_ptr[v + 1] {
                let c = self.col_idx[k];
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    queue.push(c);
                }
            }
        }
        removed == n
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                m[(r, self.col_idx[k])] = self.values[k];
            }
        }
        m
    }

    /// Largest eigenvalue magnitude, by block power iteration with
    /// Rayleigh-Ritz extraction on the projected subspace. Stops once two
    /// consecutive estimates agree to `tol` relative, or after `max_iter`
    /// iterations. Deterministic: the start block comes from a fixed
    /// splitmix64 stream.
    pub fn spectral_radius(&self, max_iter: usize, tol: f64) -> f64 {
        let n = self.n;
        if n == 0 || self.nnz() == 0 {
            return 0.0;
        }
        let m = n.min(8);
        let mut mix = Splitmix(0x6a09_e667_f3bc_c908u64 ^ n as u64);
        let mut q: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..n).map(|_| mix.next_unit() - 0.5).collect())
            .collect();
        orthonormalize(&mut q, &mut mix);

        // With a full-size block the projected matrix is similar to A and one
        // Ritz extraction is exact.
        if m == n {
            let mut v = vec![vec![0.0; n]; m];
            for i in 0..m {
                self.matvec(&q[i], &mut v[i]);
            }
            return ritz_radius(&q, &v);
        }

        let mut prev = f64::INFINITY;
        let mut streak = 0;
        let mut est = 0.0;
        let mut v: Vec<Vec<f64>> = vec![vec![0.0; n]; m];
        for _ in 0..max_iter {
            for i in 0..m {
                self.matvec(&q[i], &mut v[i]);
            }
            if v.iter().all(|col| norm(col) < 1e-150) {
                // The whole block was annihilated: nilpotent action.
                return 0.0;
            }
            est = ritz_radius(&q, &v);
            std::mem::swap(&mut q, &mut v);
            orthonormalize(&mut q, &mut mix);
            if (est - prev).abs() <= tol * est.max(f64::MIN_POSITIVE) {
                streak += 1;
                if streak >= 2 {
                    break;
                }
            } else {
                streak = 0;
            }
            prev = est;
        }
        est
    }
}

/// max |eig(Qᵀ V)| where V = A Q holds the block images.
fn ritz_radius(q: &[Vec<f64>], v: &[Vec<f64>]) -> f64 {
    let m = q.len();
    let h = DMatrix::from_fn(m, m, |i, j| dot(&q[i], &v[j]));
    h.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Modified Gram-Schmidt. Columns that collapse are replaced with fresh
/// deterministic vectors so the block keeps full rank.
fn orthonormalize(cols: &mut [Vec<f64>], mix: &mut Splitmix) {
    let m = cols.len();
    for i in 0..m {
        for _attempt in 0..4 {
            for j in 0..i {
                let (head, tail) = cols.split_at_mut(i);
                let proj = dot(&head[j], &tail[0]);
                for (t, h) in tail[0].iter_mut().zip(&head[j]) {
                    *t -= proj * h;
                }
            }
            let nrm = norm(&cols[i]);
            if nrm > 1e-150 {
                for x in &mut cols[i] {
                    *x /= nrm;
                }
                break;
            }
            for x in &mut cols[i] {
                *x = mix.next_unit() - 0.5;
            }
        }
    }
}

/// Deterministic splitmix64 stream used only for start vectors.
struct Splitmix(u64);

impl Splitmix {
    fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}
