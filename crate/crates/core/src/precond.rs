//! Classical preconditioners: stationary sweeps (Jacobi, Gauss–Seidel, SOR),
//! a geometric two-grid cycle with a Galerkin coarse operator, and an exact
//! dense inverse used as a reference.

use crate::discretize::GridSpec;
use crate::error::{Error, Result};
use crate::krylov::Preconditioner;
use crate::sparse::{CsrMatrix, DENSE_GUARD};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StationaryKind {
    /// Damped Jacobi; `damping = 1` is plain Jacobi.
    Jacobi { damping: f64 },
    /// Forward Gauss–Seidel.
    GaussSeidel,
    /// Forward successive over-relaxation.
    Sor { omega: f64 },
}

impl StationaryKind {
    pub fn jacobi() -> Self {
        StationaryKind::Jacobi { damping: 1.0 }
    }

    pub fn damped_jacobi() -> Self {
        StationaryKind::Jacobi { damping: 2.0 / 3.0 }
    }
}

/// `sweeps` steps of a stationary iteration for `A z = r` from `z = 0`.
#[derive(Debug, Clone)]
pub struct StationaryPrecond {
    a: Arc<CsrMatrix>,
    kind: StationaryKind,
    sweeps: usize,
    inv_diag: Vec<f64>,
}

impl StationaryPrecond {
    pub fn new(a: Arc<CsrMatrix>, kind: StationaryKind, sweeps: usize) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::NotSquare {
                rows: a.n_rows(),
                cols: a.n_cols(),
            });
        }
        if sweeps == 0 {
            return Err(Error::InvalidParameter("sweeps must be >= 1".into()));
        }
        match kind {
            StationaryKind::Sor { omega } if !(omega > 0.0 && omega < 2.0) => {
                return Err(Error::InvalidParameter(format!("SOR omega must be in (0, 2), got {omega}")));
            }
            StationaryKind::Jacobi { damping } if !(damping > 0.0) => {
                return Err(Error::InvalidParameter(format!("Jacobi damping must be > 0, got {damping}")));
            }
            _ => {}
        }
        let diag = a.diagonal();
        if let Some(i) = diag.iter().position(|&d| d == 0.0) {
            return Err(Error::ZeroDiagonal(i));
        }
        let inv_diag = diag.iter().map(|d| 1.0 / d).collect();
        Ok(Self {
            a,
            kind,
            sweeps,
            inv_diag,
        })
    }

    pub fn kind(&self) -> StationaryKind {
        self.kind
    }

    pub fn sweeps(&self) -> usize {
        self.sweeps
    }

    /// Performs `self.sweeps` sweeps on `z` in place for right-hand side `r`.
    pub fn smooth(&self, z: &mut [f64], r: &[f64]) -> Result<()> {
        self.smooth_n(z, r, self.sweeps)
    }

    fn smooth_n(&self, z: &mut [f64], r: &[f64], sweeps: usize) -> Result<()> {
        let n = self.a.n_rows();
        if z.len() != n || r.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: r.len().min(z.len()),
            });
        }
        for _ in 0..sweeps {
            match self.kind {
                StationaryKind::Jacobi { damping } => {
                    let az = self.a.spmv(z)?;
                    for i in 0..n {
                        z[i] += damping * self.inv_diag[i] * (r[i] - az[i]);
                    }
                }
                StationaryKind::GaussSeidel => self.sor_sweep(z, r, 1.0),
                StationaryKind::Sor { omega } => self.sor_sweep(z, r, omega),
            }
        }
        Ok(())
    }

    fn sor_sweep(&self, z: &mut [f64], r: &[f64], omega: f64) {
        for i in 0..self.a.n_rows() {
            let (cols, vals) = self.a.row(i);
            let off: f64 = cols
                .iter()
                .zip(vals)
                .filter(|(&j, _)| j != i)
                .map(|(&j, &v)| v * z[j])
                .sum();
            let gs = (r[i] - off) * self.inv_diag[i];
            z[i] = (1.0 - omega) * z[i] + omega * gs;
        }
    }
}

impl Preconditioner for StationaryPrecond {
    fn apply(&self, r: &[f64]) -> Result<Vec<f64>> {
        let mut z = vec![0.0; r.len()];
        self.smooth(&mut z, r)?;
        Ok(z)
    }

    fn claims_spd(&self) -> bool {
        matches!(self.kind, StationaryKind::Jacobi { .. })
    }

    fn describe(&self) -> String {
        match self.kind {
            StationaryKind::Jacobi { damping } if damping == 1.0 => format!("jacobi x{}", self.sweeps),
            StationaryKind::Jacobi { damping } => format!("damped-jacobi({damping:.4}) x{}", self.sweeps),
            StationaryKind::GaussSeidel => format!("gauss-seidel x{}", self.sweeps),
            StationaryKind::Sor { omega } => format!("sor({omega}) x{}", self.sweeps),
        }
    }
}

/// Linear interpolation from the every-other-point coarse grid: coarse
/// point `j` sits on fine point `2j + 1` with weights `(0.5, 1, 0.5)`.
fn interpolation_1d(n: usize) -> Vec<(usize, usize, f64)> {
    let m = (n - 1) / 2;
    (0..m)
        .flat_map(|j| [(2 * j, j, 0.5), (2 * j + 1, j, 1.0), (2 * j + 2, j, 0.5)])
        .collect()
}

/// Standard linear (1D) or bilinear (2D) prolongation for `grid`, with
/// `dofs` unknowns interleaved per node.
pub fn geometric_prolongation(grid: &GridSpec, dofs: usize) -> Result<CsrMatrix> {
    let sizes = grid.sizes();
    let px = interpolation_1d(sizes[0]);
    let mx = (sizes[0] - 1) / 2;
    let (node_trip, nf, nc): (Vec<(usize, usize, f64)>, usize, usize) = if grid.dims() == 1 {
        (px, sizes[0], mx)
    } else {
        let py = interpolation_1d(sizes[1]);
        let my = (sizes[1] - 1) / 2;
        let mut t = Vec::with_capacity(px.len() * py.len());
        for &(fy, cy, wy) in &py {
            for &(fx, cx, wx) in &px {
                t.push((fx + sizes[0] * fy, cx + mx * cy, wx * wy));
            }
        }
        (t, sizes[0] * sizes[1], mx * my)
    };
    if nc == 0 {
        return Err(Error::InvalidParameter("grid too small to coarsen".into()));
    }
    let trip = node_trip
        .into_iter()
        .flat_map(|(f, c, w)| (0..dofs).map(move |d| (f * dofs + d, c * dofs + d, w)));
    CsrMatrix::from_triplets(nf * dofs, nc * dofs, trip)
}

/// Two-grid cycle: pre-smooth, Galerkin coarse correction, post-smooth.
#[derive(Debug, Clone)]
pub struct TwoGridPrecond {
    a: Arc<CsrMatrix>,
    p: CsrMatrix,
    coarse: Option<Cholesky<f64, Dyn>>,
    smoother: StationaryPrecond,
    pre_sweeps: usize,
    post_sweeps: usize,
}

impl TwoGridPrecond {
    /// Geometric two-grid with one pre- and one post-sweep of `smoother`.
    pub fn build(a: Arc<CsrMatrix>, grid: &GridSpec, smoother: StationaryPrecond) -> Result<Self> {
        if grid.num_nodes() == 0 || !a.n_rows().is_multiple_of(grid.num_nodes()) {
            return Err(Error::IncompatibleGrid(format!(
                "matrix of size {} does not match a grid of {} nodes",
                a.n_rows(),
                grid.num_nodes()
            )));
        }
        let dofs = a.n_rows() / grid.num_nodes();
        let p = geometric_prolongation(grid, dofs)?;
        Self::from_prolongation(a, p, smoother, 1, 1)
    }

    /// Two-grid cycle for an arbitrary prolongation (`m` may equal `n`, and
    /// an `n x 0` prolongation disables the coarse correction).
    pub fn from_prolongation(
        a: Arc<CsrMatrix>,
        p: CsrMatrix,
        smoother: StationaryPrecond,
        pre_sweeps: usize,
        post_sweeps: usize,
    ) -> Result<Self> {
        if p.n_rows() != a.n_rows() {
            return Err(Error::DimensionMismatch {
                expected: a.n_rows(),
                got: p.n_rows(),
            });
        }
        if p.n_cols() > DENSE_GUARD {
            return Err(Error::CoarseTooLarge(p.n_cols(), DENSE_GUARD));
        }
        let coarse = if p.n_cols() == 0 {
            None
        } else {
            let ac = p.transpose().matmul(&a)?.matmul(&p)?;
            let dense = ac.to_dense()?;
            Some(Cholesky::new(dense).ok_or(Error::NotSpd(f64::NAN))?)
        };
        Ok(Self {
            a,
            p,
            coarse,
            smoother,
            pre_sweeps,
            post_sweeps,
        })
    }

    pub fn prolongation(&self) -> &CsrMatrix {
        &self.p
    }

    /// Galerkin coarse operator `Pᵀ A P`.
    pub fn coarse_matrix(&self) -> Result<CsrMatrix> {
        self.p.transpose().matmul(&self.a)?.matmul(&self.p)
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.a
    }

    fn coarse_correct(&self, z: &mut [f64], r: &[f64]) -> Result<()> {
        let Some(chol) = &self.coarse else {
            return Ok(());
        };
        let res = self.a.residual(r, z)?;
        let rc = self.p.spmv_transpose(&res)?;
        let ec = chol.solve(&DVector::from_vec(rc));
        let e = self.p.spmv(ec.as_slice())?;
        for (zi, ei) in z.iter_mut().zip(&e) {
            *zi += ei;
        }
        Ok(())
    }
}

impl Preconditioner for TwoGridPrecond {
    fn apply(&self, r: &[f64]) -> Result<Vec<f64>> {
        if r.len() != self.a.n_rows() {
            return Err(Error::DimensionMismatch {
                expected: self.a.n_rows(),
                got: r.len(),
            });
        }
        let mut z = vec![0.0; r.len()];
        self.smoother.smooth_n(&mut z, r, self.pre_sweeps)?;
        self.coarse_correct(&mut z, r)?;
        self.smoother.smooth_n(&mut z, r, self.post_sweeps)?;
        Ok(z)
    }

    fn claims_spd(&self) -> bool {
        self.smoother.claims_spd() && self.pre_sweeps == self.post_sweeps
    }

    fn describe(&self) -> String {
        format!(
            "two-grid(m={}, {} pre/{} post, {})",
            self.p.n_cols(),
            self.pre_sweeps,
            self.post_sweeps,
            self.smoother.describe()
        )
    }
}

/// Exact inverse through a dense LU factorization. Reference operator for
/// tests and spectrum checks; guarded at `DENSE_GUARD`.
#[derive(Debug, Clone)]
pub struct ExactInverse {
    lu: LU<f64, Dyn, Dyn>,
}

impl ExactInverse {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        let lu = a.to_dense()?.lu();
        if !lu.is_invertible() {
            return Err(Error::Singular);
        }
        Ok(Self { lu })
    }

    pub fn from_dense(d: DMatrix<f64>) -> Result<Self> {
        let lu = d.lu();
        if !lu.is_invertible() {
            return Err(Error::Singular);
        }
        Ok(Self { lu })
    }
}

impl Preconditioner for ExactInverse {
    fn apply(&self, r: &[f64]) -> Result<Vec<f64>> {
        let x = self
            .lu
            .solve(&DVector::from_column_slice(r))
            .ok_or(Error::Singular)?;
        Ok(x.as_slice().to_vec())
    }

    fn claims_spd(&self) -> bool {
        true
    }

    fn describe(&self) -> String {
        "exact-inverse".into()
    }
}
