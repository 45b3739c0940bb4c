//! Compressed sparse row matrices and the handful of vector kernels the
//! solvers need.
//!
//! Matrices are always kept in canonical form: column indices strictly
//! increasing within each row, no duplicates. Assembly goes through
//! [`CsrMatrix::from_triplets`], which sorts and merges duplicates by
//! summation.

use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// Largest dimension accepted by [`CsrMatrix::to_dense`].
pub const DENSE_GUARD: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from raw CSR arrays, validating canonical form.
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_offsets.len() != n_rows + 1 {
            return Err(Error::MalformedCsr(format!(
                "row_offsets has length {}, expected {}",
                row_offsets.len(),
                n_rows + 1
            )));
        }
        if row_offsets[0] != 0 || row_offsets[n_rows] != values.len() {
            return Err(Error::MalformedCsr("row_offsets endpoints".into()));
        }
        if col_indices.len() != values.len() {
            return Err(Error::MalformedCsr(
                "col_indices and values differ in length".into(),
            ));
        }
        for i in 0..n_rows {
            let (lo, hi) = (row_offsets[i], row_offsets[i + 1]);
            if lo > hi {
                return Err(Error::MalformedCsr(format!("row_offsets decrease at row {i}")));
            }
            let cols = &col_indices[lo..hi];
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::MalformedCsr(format!(
                    "columns of row {i} not strictly increasing"
                )));
            }
            if cols.iter().any(|&c| c >= n_cols) {
                return Err(Error::MalformedCsr(format!("column out of range in row {i}")));
            }
        }
        Ok(Self {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    /// Assembles from unsorted `(row, col, value)` triplets. Duplicates are
    /// summed; explicit zeros are kept so that sparsity patterns stay stable.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut t: Vec<(usize, usize, f64)> = triplets.into_iter().collect();
        for &(r, c, _) in &t {
            if r >= n_rows || c >= n_cols {
                return Err(Error::MalformedCsr(format!(
                    "triplet ({r}, {c}) outside {n_rows}x{n_cols}"
                )));
            }
        }
        t.sort_by_key(|a| (a.0, a.1));

        let mut row_offsets = vec![0usize; n_rows + 1];
        let mut col_indices = Vec::with_capacity(t.len());
        let mut values: Vec<f64> = Vec::with_capacity(t.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in t {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            col_indices.push(c);
            values.push(v);
            row_offsets[r + 1] += 1;
            last = Some((r, c));
        }
        for i in 0..n_rows {
            row_offsets[i + 1] += row_offsets[i];
        }
        Self::new(n_rows, n_cols, row_offsets, col_indices, values)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            row_offsets: vec![0; n_rows + 1],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Dense-to-sparse conversion dropping exact zeros.
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let trip = (0..m.nrows())
            .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
            .filter_map(|(i, j)| {
                let v = m[(i, j)];
                (v != 0.0).then_some((i, j, v))
            });
        Self::from_triplets(m.nrows(), m.ncols(), trip).expect("dense indices are in range")
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn is_square(&self) -> bool {
        self.n_rows == self.n_cols
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.row_offsets[i], self.row_offsets[i + 1]);
        (&self.col_indices[lo..hi], &self.values[lo..hi])
    }

    /// Entry lookup by binary search; absent entries are zero.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map(|k| vals[k]).unwrap_or(0.0)
    }

    /// Iterates over stored `(row, col, value)` entries in row-major order.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).map(move |(&j, &v)| (i, j, v))
        })
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n_rows.min(self.n_cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_triplets(
            self.n_cols,
            self.n_rows,
            self.triplets().map(|(i, j, v)| (j, i, v)),
        )
        .expect("transpose of a valid matrix is valid")
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    /// `self + alpha * other` for matrices of equal shape.
    pub fn add_scaled(&self, alpha: f64, other: &CsrMatrix) -> Result<Self> {
        if self.n_rows != other.n_rows || self.n_cols != other.n_cols {
            return Err(Error::DimensionMismatch {
                expected: self.n_rows,
                got: other.n_rows,
            });
        }
        Self::from_triplets(
            self.n_rows,
            self.n_cols,
            self.triplets()
                .chain(other.triplets().map(|(i, j, v)| (i, j, alpha * v))),
        )
    }

    /// Sparse matrix product. Only used for Galerkin coarse operators, so
    /// a straightforward row-by-row accumulation is enough.
    pub fn matmul(&self, other: &CsrMatrix) -> Result<Self> {
        if self.n_cols != other.n_rows {
            return Err(Error::DimensionMismatch {
                expected: self.n_cols,
                got: other.n_rows,
            });
        }
        let mut trip = Vec::new();
        let mut acc = vec![0.0; other.n_cols];
        let mut touched: Vec<usize> = Vec::new();
        let mut mark = vec![false; other.n_cols];
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&k, &a) in cols.iter().zip(vals) {
                let (ocols, ovals) = other.row(k);
                for (&j, &b) in ocols.iter().zip(ovals) {
                    if !mark[j] {
                        mark[j] = true;
                        touched.push(j);
                    }
                    acc[j] += a * b;
                }
            }
            for &j in &touched {
                trip.push((i, j, acc[j]));
                acc[j] = 0.0;
                mark[j] = false;
            }
            touched.clear();
        }
        Self::from_triplets(self.n_rows, other.n_cols, trip)
    }

    /// `y = A x`.
    pub fn spmv(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = vec![0.0; self.n_rows];
        self.spmv_into(x, &mut y)?;
        Ok(y)
    }

    pub fn spmv_into(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        if x.len() != self.n_cols {
            return Err(Error::DimensionMismatch {
                expected: self.n_cols,
                got: x.len(),
            });
        }
        if y.len() != self.n_rows {
            return Err(Error::DimensionMismatch {
                expected: self.n_rows,
                got: y.len(),
            });
        }
        for (i, yi) in y.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            *yi = cols.iter().zip(vals).map(|(&j, &v)| v * x[j]).sum();
        }
        Ok(())
    }

    /// `y = Aᵀ x` without forming the transpose.
    pub fn spmv_transpose(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_rows {
            return Err(Error::DimensionMismatch {
                expected: self.n_rows,
                got: x.len(),
            });
        }
        let mut y = vec![0.0; self.n_cols];
        for (i, &xi) in x.iter().enumerate() {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                y[j] += v * xi;
            }
        }
        Ok(y)
    }

    /// Exact dense copy, guarded at [`DENSE_GUARD`] per dimension.
    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        if self.n_rows > DENSE_GUARD || self.n_cols > DENSE_GUARD {
            return Err(Error::DenseGuard {
                rows: self.n_rows,
                cols: self.n_cols,
                limit: DENSE_GUARD,
            });
        }
        let mut d = DMatrix::zeros(self.n_rows, self.n_cols);
        for (i, j, v) in self.triplets() {
            d[(i, j)] = v;
        }
        Ok(d)
    }

    /// True iff `|A_ij - A_ji| <= tol` for every stored entry.
    pub fn is_symmetric(&self, tol: f64) -> Result<bool> {
        if !self.is_square() {
            return Err(Error::NotSquare {
                rows: self.n_rows,
                cols: self.n_cols,
            });
        }
        Ok(self
            .triplets()
            .all(|(i, j, v)| (v - self.get(j, i)).abs() <= tol))
    }

    /// Energy norm `sqrt(vᵀ A v)`.
    pub fn energy_norm(&self, v: &[f64]) -> Result<f64> {
        let sq = self.energy_norm_sq(v)?;
        let tol = 1e-12 * dot(v, v) * self.max_abs().max(1.0);
        if sq < -tol {
            return Err(Error::NotSpd(sq));
        }
        Ok(sq.max(0.0).sqrt())
    }

    /// `vᵀ A v` evaluated as `dot(v, spmv(A, v))`.
    pub fn energy_norm_sq(&self, v: &[f64]) -> Result<f64> {
        if !self.is_square() {
            return Err(Error::NotSquare {
                rows: self.n_rows,
                cols: self.n_cols,
            });
        }
        let av = self.spmv(v)?;
        Ok(dot(v, &av))
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Residual `b - A x`.
    pub fn residual(&self, b: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let ax = self.spmv(x)?;
        if b.len() != ax.len() {
            return Err(Error::DimensionMismatch {
                expected: ax.len(),
                got: b.len(),
            });
        }
        Ok(b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}
