//! Spectral diagnostics for preconditioned operators: extreme eigenvalues
//! and condition numbers of `MA`, two-grid contraction factors, and
//! energy-norm approximation quality of a coarse space.
//!
//! Everything here works on dense copies and is meant for desk-scale
//! problems (`n <= 1024`).

use crate::error::{Error, Result};
use crate::krylov::Preconditioner;
use crate::sparse::{CsrMatrix, DENSE_GUARD};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use std::fmt;

/// Size limit for the dense spectral oracles.
pub const SPECTRAL_GUARD: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumMethod {
    DenseOracle,
    Lanczos,
    PowerIteration,
}

impl fmt::Display for SpectrumMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpectrumMethod::DenseOracle => "dense_oracle",
            SpectrumMethod::Lanczos => "lanczos",
            SpectrumMethod::PowerIteration => "power_iteration",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub kappa: f64,
    pub method: SpectrumMethod,
    pub size: usize,
    pub preconditioner: String,
    /// False when `MA` was not symmetrizable; the extremes are then
    /// eigenvalue moduli of the operator's action on unit vectors, i.e. a
    /// linearization for nonlinear preconditioners.
    pub symmetric: bool,
}

impl SpectrumReport {
    fn new(lmin: f64, lmax: f64, method: SpectrumMethod, size: usize, m: &dyn Preconditioner, symmetric: bool) -> Self {
        let kappa = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
        Self {
            lambda_min: lmin,
            lambda_max: lmax,
            kappa,
            method,
            size,
            preconditioner: m.describe(),
            symmetric,
        }
    }
}

fn guard(n: usize, limit: usize) -> Result<()> {
    if n > limit {
        return Err(Error::DenseGuard {
            rows: n,
            cols: n,
            limit,
        });
    }
    Ok(())
}

/// Dense matrix of a preconditioner, one application per unit vector.
pub fn dense_operator(m: &dyn Preconditioner, n: usize) -> Result<DMatrix<f64>> {
    guard(n, DENSE_GUARD)?;
    let mut out = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = m.apply(&e)?;
        if col.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: col.len(),
            });
        }
        out.set_column(j, &DVector::from_vec(col));
        e[j] = 0.0;
    }
    Ok(out)
}

/// Dense `MA`, built by applying `M` to the columns of `A`.
pub fn dense_preconditioned(a: &CsrMatrix, m: &dyn Preconditioner) -> Result<DMatrix<f64>> {
    let n = a.n_rows();
    guard(n, DENSE_GUARD)?;
    let ad = a.to_dense()?;
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        let col: Vec<f64> = ad.column(j).iter().copied().collect();
        out.set_column(j, &DVector::from_vec(m.apply(&col)?));
    }
    Ok(out)
}

fn cholesky(a: &CsrMatrix) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(a.to_dense()?).ok_or(Error::NotSpd(f64::NAN))
}

/// `Lᵀ M L` for `A = L Lᵀ`; similar to `MA` and symmetric when `M` is.
fn symmetrized(a: &CsrMatrix, m: &dyn Preconditioner) -> Result<DMatrix<f64>> {
    let l = cholesky(a)?.l();
    let n = a.n_rows();
    let mut ml = DMatrix::zeros(n, n);
    for j in 0..n {
        let col: Vec<f64> = l.column(j).iter().copied().collect();
        ml.set_column(j, &DVector::from_vec(m.apply(&col)?));
    }
    let s = l.transpose() * ml;
    Ok((&s + s.transpose()) * 0.5)
}

fn symmetrizable(a: &CsrMatrix, m: &dyn Preconditioner) -> Result<bool> {
    Ok(m.claims_spd() && a.is_symmetric(1e-12 * a.max_abs())?)
}

fn extreme_moduli(d: DMatrix<f64>) -> (f64, f64) {
    let eig = d.complex_eigenvalues();
    eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), z| {
        let r = z.norm();
        (lo.min(r), hi.max(r))
    })
}

/// Extreme eigenvalues and condition number of `MA`.
pub fn estimate_spectrum(a: &CsrMatrix, m: &dyn Preconditioner, method: SpectrumMethod) -> Result<SpectrumReport> {
    let n = a.n_rows();
    guard(n, SPECTRAL_GUARD)?;
    let sym = symmetrizable(a, m)?;
    match method {
        SpectrumMethod::DenseOracle => {
            if sym {
                let ev = SymmetricEigen::new(symmetrized(a, m)?).eigenvalues;
                Ok(SpectrumReport::new(ev.min(), ev.max(), method, n, m, true))
            } else {
                let (lo, hi) = extreme_moduli(dense_preconditioned(a, m)?);
                Ok(SpectrumReport::new(lo, hi, method, n, m, false))
            }
        }
        SpectrumMethod::Lanczos => {
            if !sym {
                return Err(Error::InvalidParameter(
                    "lanczos needs a symmetrizable MA (SPD preconditioner); use power_iteration".into(),
                ));
            }
            let (lo, hi) = lanczos_extremes(a, m, n.min(200))?;
            Ok(SpectrumReport::new(lo, hi, method, n, m, true))
        }
        SpectrumMethod::PowerIteration => {
            let dense = dense_preconditioned(a, m)?;
            let hi = power_iteration(&dense, 2000, 1e-12);
            let lu = dense.lu();
            let lo = 1.0 / power_iteration_with(n, 2000, 1e-12, |v| lu.solve(v).unwrap_or_else(|| v.clone() * 0.0));
            Ok(SpectrumReport::new(lo, hi, method, n, m, sym))
        }
    }
}

fn start_vector(n: usize) -> DVector<f64> {
    // fixed, non-degenerate start so results are reproducible
    DVector::from_iterator(n, (0..n).map(|i| 1.0 + 0.5 * ((i as f64 + 1.0) * 0.7548776662).fract()))
}

fn power_iteration(d: &DMatrix<f64>, iters: usize, tol: f64) -> f64 {
    power_iteration_with(d.nrows(), iters, tol, |v| d * v)
}

/// Dominant eigenvalue modulus of a linear map by power iteration.
fn power_iteration_with(n: usize, iters: usize, tol: f64, apply: impl Fn(&DVector<f64>) -> DVector<f64>) -> f64 {
    let mut v = start_vector(n);
    v /= v.norm();
    let mut est = 0.0;
    for _ in 0..iters {
        let w = apply(&v);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let prev = est;
        est = norm;
        v = w / norm;
        if (est - prev).abs() <= tol * est {
            break;
        }
    }
    est
}

/// Lanczos on `MA` in the `A` inner product (where `MA` is self-adjoint)
/// with full reorthogonalization; returns the extreme Ritz values.
fn lanczos_extremes(a: &CsrMatrix, m: &dyn Preconditioner, steps: usize) -> Result<(f64, f64)> {
    let n = a.n_rows();
    let ip = |x: &[f64], y: &[f64]| -> Result<f64> {
        let ay = a.spmv(y)?;
        Ok(crate::sparse::dot(x, &ay))
    };
    let mut q: Vec<Vec<f64>> = Vec::new();
    let v0 = start_vector(n);
    let nrm = ip(v0.as_slice(), v0.as_slice())?.sqrt();
    q.push(v0.iter().map(|x| x / nrm).collect());
    let mut alpha = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    for j in 0..steps {
        let mut w = m.apply(&a.spmv(&q[j])?)?;
        let aj = ip(&w, &q[j])?;
        alpha.push(aj);
        for _ in 0..2 {
            for qi in &q {
                let c = ip(&w, qi)?;
                crate::sparse::axpy(-c, qi, &mut w);
            }
        }
        let bj = ip(&w, &w)?.max(0.0).sqrt();
        if j + 1 == steps || bj <= 1e-12 * aj.abs().max(1.0) {
            break;
        }
        beta.push(bj);
        q.push(w.iter().map(|x| x / bj).collect());
    }
    let k = alpha.len();
    let mut t = DMatrix::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alpha[i];
        if i + 1 < k {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let ev = SymmetricEigen::new(t).eigenvalues;
    Ok((ev.min(), ev.max()))
}

/// Spectral radius of the error propagator `E = I - M A` for one or more
/// problem sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractionReport {
    /// Largest spectral radius over the tested sizes.
    pub rho: f64,
    pub sizes: Vec<usize>,
    pub per_size: Vec<f64>,
    /// `||E||_A` per size, from the symmetrized form `Lᵀ E L⁻ᵀ`.
    pub energy_bounds: Vec<f64>,
}

impl ContractionReport {
    /// `max - min` of the per-size factors.
    pub fn spread(&self) -> f64 {
        let lo = self.per_size.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.per_size.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    }

    pub fn merge(reports: impl IntoIterator<Item = ContractionReport>) -> ContractionReport {
        let mut out = ContractionReport {
            rho: 0.0,
            sizes: vec![],
            per_size: vec![],
            energy_bounds: vec![],
        };
        for r in reports {
            out.rho = out.rho.max(r.rho);
            out.sizes.extend(r.sizes);
            out.per_size.extend(r.per_size);
            out.energy_bounds.extend(r.energy_bounds);
        }
        out
    }
}

/// Dense error propagator `E = I - M A`: column `j` is the cycle applied in
/// error form to the unit error `e_j`.
pub fn error_propagator(a: &CsrMatrix, m: &dyn Preconditioner) -> Result<DMatrix<f64>> {
    let ma = dense_preconditioned(a, m)?;
    Ok(DMatrix::identity(ma.nrows(), ma.ncols()) - ma)
}

pub fn contraction_factor(m: &dyn Preconditioner, a: &CsrMatrix) -> Result<ContractionReport> {
    let n = a.n_rows();
    guard(n, SPECTRAL_GUARD)?;
    let chol = cholesky(a)?;
    let l = chol.l();
    let (rho, bound) = if symmetrizable(a, m)? {
        let s = DMatrix::identity(n, n) - symmetrized(a, m)?;
        let ev = SymmetricEigen::new(s).eigenvalues;
        let r = ev.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
        (r, r)
    } else {
        let e = error_propagator(a, m)?;
        let (_, r) = extreme_moduli(e.clone());
        // Lᵀ E L⁻ᵀ
        let lt = l.transpose();
        let right = lt
            .clone()
            .solve_upper_triangular(&DMatrix::identity(n, n))
            .ok_or(Error::Singular)?;
        let s = &lt * e * right;
        let sv = s.singular_values();
        (r, sv.max())
    };
    Ok(ContractionReport {
        rho,
        sizes: vec![n],
        per_size: vec![rho],
        energy_bounds: vec![bound],
    })
}

/// Energy-norm best-approximation ratio `min_z ||e - P z||_A / ||e||_A`,
/// solved exactly through the coarse normal equations `(PᵀAP) z = PᵀA e`.
pub fn approximation_quality(p: &CsrMatrix, a: &CsrMatrix, e: &[f64]) -> Result<f64> {
    guard(a.n_rows(), SPECTRAL_GUARD)?;
    let enorm = a.energy_norm(e)?;
    if enorm == 0.0 {
        return Err(Error::InvalidParameter("error vector has zero energy norm".into()));
    }
    let ac = p.transpose().matmul(a)?.matmul(p)?.to_dense()?;
    let rhs = p.spmv_transpose(&a.spmv(e)?)?;
    let z = Cholesky::new(ac)
        .ok_or(Error::NotSpd(f64::NAN))?
        .solve(&DVector::from_vec(rhs));
    let pz = p.spmv(z.as_slice())?;
    let diff: Vec<f64> = e.iter().zip(&pz).map(|(x, y)| x - y).collect();
    Ok(a.energy_norm(&diff)? / enorm)
}

/// Analytic eigenvalues `(2 - 2cos(kπ/(n+1)))/h²`, `k = 1..=n`, ascending.
pub fn poisson1d_eigenvalues(n: usize, h: f64) -> Vec<f64> {
    (1..=n)
        .map(|k| (2.0 - 2.0 * (k as f64 * std::f64::consts::PI / (n as f64 + 1.0)).cos()) / (h * h))
        .collect()
}

/// Analytic eigenvector `sin(kπ i/(n+1))`, `i = 1..=n`, for mode `k >= 1`.
pub fn poisson1d_eigenvector(n: usize, k: usize) -> Vec<f64> {
    (1..=n)
        .map(|i| (k as f64 * i as f64 * std::f64::consts::PI / (n as f64 + 1.0)).sin())
        .collect()
}
