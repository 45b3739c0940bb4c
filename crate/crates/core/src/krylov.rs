//! Preconditioned conjugate gradient and restarted, left-preconditioned
//! GMRES, both with optional trajectory recording.
//!
//! Both solvers start from `x0 = 0`. Convergence is always judged on the
//! true relative residual `||b - A x_k|| / ||b||`, which is also what the
//! trace records, so iteration counts are comparable across
//! preconditioners. One preconditioned matvec is one iteration; the initial
//! residual is iteration 0.

use crate::error::{Error, Result};
use crate::sparse::{all_finite, axpy, dot, norm2, CsrMatrix};
use std::fmt::Write as _;

/// An operator approximating `A^{-1}`.
pub trait Preconditioner: Send + Sync {
    fn apply(&self, r: &[f64]) -> Result<Vec<f64>>;

    /// Whether the operator is symmetric positive definite (required by CG).
    fn claims_spd(&self) -> bool;

    fn describe(&self) -> String {
        "preconditioner".into()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityPrecond;

impl Preconditioner for IdentityPrecond {
    fn apply(&self, r: &[f64]) -> Result<Vec<f64>> {
        Ok(r.to_vec())
    }

    fn claims_spd(&self) -> bool {
        true
    }

    fn describe(&self) -> String {
        "none".into()
    }
}

impl<P: Preconditioner + ?Sized> Preconditioner for &P {
    fn apply(&self, r: &[f64]) -> Result<Vec<f64>> {
        (**self).apply(r)
    }
    fn claims_spd(&self) -> bool {
        (**self).claims_spd()
    }
    fn describe(&self) -> String {
        (**self).describe()
    }
}

impl<P: Preconditioner + ?Sized> Preconditioner for Box<P> {
    fn apply(&self, r: &[f64]) -> Result<Vec<f64>> {
        (**self).apply(r)
    }
    fn claims_spd(&self) -> bool {
        (**self).claims_spd()
    }
    fn describe(&self) -> String {
        (**self).describe()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveConfig {
    /// Relative residual tolerance.
    pub tol: f64,
    pub max_iters: usize,
    /// GMRES restart length; `None` means full GMRES (`restart = max_iters`).
    pub restart: Option<usize>,
    pub record_trajectory: bool,
    pub record_stride: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 1000,
            restart: None,
            record_trajectory: false,
            record_stride: 1,
        }
    }
}

impl SolveConfig {
    pub fn new(tol: f64, max_iters: usize) -> Self {
        Self {
            tol,
            max_iters,
            ..Self::default()
        }
    }

    /// Dataset-generation defaults: tol 1e-10, at most 100 iterations,
    /// every iterate recorded.
    pub fn dataset() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 100,
            restart: None,
            record_trajectory: true,
            record_stride: 1,
        }
    }

    pub fn with_restart(mut self, restart: usize) -> Self {
        self.restart = Some(restart);
        self
    }

    pub fn recording(mut self, stride: usize) -> Self {
        self.record_trajectory = true;
        self.record_stride = stride;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be >= 1".into()));
        }
        if self.restart == Some(0) {
            return Err(Error::InvalidParameter("restart must be >= 1".into()));
        }
        if self.record_trajectory && self.record_stride == 0 {
            return Err(Error::InvalidParameter("record_stride must be >= 1".into()));
        }
        Ok(())
    }
}

/// An iterate and its true residual.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub k: usize,
    pub x: Vec<f64>,
    pub r: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveTrace {
    pub converged: bool,
    pub iterations: usize,
    /// Relative true residual per iteration, starting with iteration 0.
    pub residual_norms: Vec<f64>,
    /// Iterates at multiples of the stride, plus the final iterate.
    pub snapshots: Vec<Snapshot>,
}

impl SolveTrace {
    /// First iteration whose relative residual is `<= tol`.
    pub fn first_crossing(&self, tol: f64) -> Option<usize> {
        self.residual_norms.iter().position(|&r| r <= tol)
    }

    pub fn final_residual(&self) -> f64 {
        *self.residual_norms.last().expect("trace is never empty")
    }

    /// CSV with header `iter,residual_norm`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,residual_norm\n");
        for (k, r) in self.residual_norms.iter().enumerate() {
            writeln!(s, "{k},{r:e}").unwrap();
        }
        s
    }
}

struct Recorder<'a> {
    a: &'a CsrMatrix,
    b: &'a [f64],
    stride: Option<usize>,
    snapshots: Vec<Snapshot>,
}

impl<'a> Recorder<'a> {
    fn new(a: &'a CsrMatrix, b: &'a [f64], cfg: &SolveConfig) -> Self {
        Self {
            a,
            b,
            stride: cfg.record_trajectory.then_some(cfg.record_stride),
            snapshots: Vec::new(),
        }
    }

    fn offer(&mut self, k: usize, x: &[f64]) -> Result<()> {
        if let Some(s) = self.stride {
            if k.is_multiple_of(s) {
                self.push(k, x)?;
            }
        }
        Ok(())
    }

    fn push(&mut self, k: usize, x: &[f64]) -> Result<()> {
        let r = self.a.residual(self.b, x)?;
        self.snapshots.push(Snapshot { k, x: x.to_vec(), r });
        Ok(())
    }

    fn finish(mut self, k: usize, x: &[f64]) -> Result<Vec<Snapshot>> {
        if self.stride.is_some() && self.snapshots.last().map(|s| s.k) != Some(k) {
            self.push(k, x)?;
        }
        Ok(self.snapshots)
    }
}

fn check_system(a: &CsrMatrix, b: &[f64]) -> Result<()> {
    if !a.is_square() {
        return Err(Error::NotSquare {
            rows: a.n_rows(),
            cols: a.n_cols(),
        });
    }
    if b.len() != a.n_rows() {
        return Err(Error::DimensionMismatch {
            expected: a.n_rows(),
            got: b.len(),
        });
    }
    Ok(())
}

fn checked_apply(m: &dyn Preconditioner, r: &[f64]) -> Result<Vec<f64>> {
    let z = m.apply(r)?;
    if z.len() != r.len() {
        return Err(Error::DimensionMismatch {
            expected: r.len(),
            got: z.len(),
        });
    }
    Ok(z)
}

/// Preconditioned conjugate gradient.
pub fn cg_solve(
    a: &CsrMatrix,
    b: &[f64],
    m: &dyn Preconditioner,
    cfg: &SolveConfig,
) -> Result<(Vec<f64>, SolveTrace)> {
    cfg.validate()?;
    check_system(a, b)?;
    if !m.claims_spd() {
        log::warn!("CG with a preconditioner that does not claim SPD ({})", m.describe());
    }
    let n = b.len();
    let bnorm = norm2(b);
    let mut rec = Recorder::new(a, b, cfg);
    let mut x = vec![0.0; n];
    rec.offer(0, &x)?;
    if bnorm == 0.0 {
        let snapshots = rec.finish(0, &x)?;
        return Ok((x, SolveTrace { converged: true, iterations: 0, residual_norms: vec![0.0], snapshots }));
    }

    let mut r = b.to_vec();
    let mut norms = vec![1.0];
    let mut z = checked_apply(m, &r)?;
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut converged = false;
    let mut k = 0;
    while k < cfg.max_iters {
        a.spmv_into(&p, &mut ap)?;
        let pap = dot(&p, &ap);
        if !pap.is_finite() {
            return Err(Error::Divergence(k));
        }
        if pap <= 0.0 {
            return Err(Error::Indefinite(pap, k));
        }
        let alpha = rz / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        k += 1;
        if !all_finite(&x) {
            return Err(Error::Divergence(k));
        }
        let mut rel = norm2(&r) / bnorm;
        if rel <= cfg.tol {
            // guard against drift of the recursive residual
            r = a.residual(b, &x)?;
            rel = norm2(&r) / bnorm;
        }
        norms.push(rel);
        rec.offer(k, &x)?;
        if rel <= cfg.tol {
            converged = true;
            break;
        }
        z = checked_apply(m, &r)?;
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    let snapshots = rec.finish(k, &x)?;
    Ok((
        x,
        SolveTrace {
            converged,
            iterations: k,
            residual_norms: norms,
            snapshots,
        },
    ))
}

/// Computes the Givens rotation zeroing `b` in `(a, b)`.
fn givens(a: f64, b: f64) -> (f64, f64) {
    if b == 0.0 {
        (1.0, 0.0)
    } else {
        let h = a.hypot(b);
        (a / h, b / h)
    }
}

/// Left-preconditioned GMRES with modified Gram–Schmidt Arnoldi and Givens
/// least squares, restarted every `cfg.restart` inner iterations.
pub fn gmres_solve(
    a: &CsrMatrix,
    b: &[f64],
    m: &dyn Preconditioner,
    cfg: &SolveConfig,
) -> Result<(Vec<f64>, SolveTrace)> {
    cfg.validate()?;
    check_system(a, b)?;
    let n = b.len();
    let restart = cfg.restart.unwrap_or(cfg.max_iters).max(1);
    let bnorm = norm2(b);
    let mut rec = Recorder::new(a, b, cfg);
    let mut x = vec![0.0; n];
    rec.offer(0, &x)?;
    if bnorm == 0.0 {
        let snapshots = rec.finish(0, &x)?;
        return Ok((x, SolveTrace { converged: true, iterations: 0, residual_norms: vec![0.0], snapshots }));
    }

    let mut norms = vec![1.0];
    let mut total = 0usize;
    let mut converged = false;

    'outer: while total < cfg.max_iters {
        let r0 = a.residual(b, &x)?;
        if norm2(&r0) / bnorm <= cfg.tol {
            converged = true;
            break;
        }
        let z0 = checked_apply(m, &r0)?;
        let beta = norm2(&z0);
        if !beta.is_finite() {
            return Err(Error::Divergence(total));
        }
        if beta == 0.0 {
            // M annihilates a nonzero residual: no progress is possible.
            log::warn!("GMRES stalled: preconditioned residual is zero");
            break;
        }
        let cycle = restart.min(cfg.max_iters - total);
        let mut v: Vec<Vec<f64>> = Vec::with_capacity(cycle + 1);
        let mut av: Vec<Vec<f64>> = Vec::with_capacity(cycle);
        // Upper-triangular factor stored column-wise; column j has j+1 entries.
        let mut rcols: Vec<Vec<f64>> = Vec::with_capacity(cycle);
        let mut rot: Vec<(f64, f64)> = Vec::with_capacity(cycle);
        let mut g = vec![0.0; cycle + 1];
        g[0] = beta;
        v.push(z0.iter().map(|zi| zi / beta).collect());
        let mut y = Vec::new();

        for j in 0..cycle {
            let avj = a.spmv(&v[j])?;
            let mut w = checked_apply(m, &avj)?;
            av.push(avj);
            let wnorm0 = norm2(&w);
            let mut h = vec![0.0; j + 2];
            for (i, vi) in v.iter().enumerate() {
                h[i] = dot(&w, vi);
                axpy(-h[i], vi, &mut w);
            }
            let hnext = norm2(&w);
            h[j + 1] = hnext;
            if !hnext.is_finite() {
                return Err(Error::Divergence(total + 1));
            }
            for (i, &(c, s)) in rot.iter().enumerate() {
                let (hi, hi1) = (h[i], h[i + 1]);
                h[i] = c * hi + s * hi1;
                h[i + 1] = -s * hi + c * hi1;
            }
            let (c, s) = givens(h[j], h[j + 1]);
            h[j] = c * h[j] + s * h[j + 1];
            g[j + 1] = -s * g[j];
            g[j] *= c;
            rot.push((c, s));
            h.truncate(j + 1);
            rcols.push(h);
            total += 1;

            y = back_substitute(&rcols, &g[..=j]);
            let mut rk = r0.clone();
            for (yi, avi) in y.iter().zip(&av) {
                axpy(-yi, avi, &mut rk);
            }
            let rel = norm2(&rk) / bnorm;
            if !rel.is_finite() {
                return Err(Error::Divergence(total));
            }
            norms.push(rel);
            if rec.stride.is_some_and(|s| total.is_multiple_of(s)) {
                let xk = combine(&x, &v, &y);
                rec.offer(total, &xk)?;
            }
            if rel <= cfg.tol {
                x = combine(&x, &v, &y);
                converged = true;
                break 'outer;
            }
            if hnext <= 1e-14 * wnorm0.max(f64::MIN_POSITIVE) {
                // happy breakdown: the Krylov space is invariant
                break;
            }
            v.push(w.iter().map(|wi| wi / hnext).collect());
        }
        x = combine(&x, &v, &y);
        if !all_finite(&x) {
            return Err(Error::Divergence(total));
        }
    }
    let snapshots = rec.finish(total, &x)?;
    Ok((
        x,
        SolveTrace {
            converged,
            iterations: total,
            residual_norms: norms,
            snapshots,
        },
    ))
}

fn back_substitute(rcols: &[Vec<f64>], g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let mut y = g.to_vec();
    for i in (0..k).rev() {
        y[i] /= rcols[i][i];
        let yi = y[i];
        for (l, yl) in y.iter_mut().enumerate().take(i) {
            *yl -= rcols[i][l] * yi;
        }
    }
    y
}

fn combine(x: &[f64], v: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    for (yi, vi) in y.iter().zip(v) {
        axpy(*yi, vi, &mut out);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Cg,
    Gmres,
}

pub fn solve(
    kind: SolverKind,
    a: &CsrMatrix,
    b: &[f64],
    m: &dyn Preconditioner,
    cfg: &SolveConfig,
) -> Result<(Vec<f64>, SolveTrace)> {
    match kind {
        SolverKind::Cg => cg_solve(a, b, m, cfg),
        SolverKind::Gmres => gmres_solve(a, b, m, cfg),
    }
}

/// Runs GMRES with trajectory recording and returns every snapshot,
/// starting with `(0, 0, b)`.
pub fn record_dataset(
    a: &CsrMatrix,
    b: &[f64],
    m: &dyn Preconditioner,
    cfg: &SolveConfig,
) -> Result<(Vec<Snapshot>, SolveTrace)> {
    if !cfg.record_trajectory {
        return Err(Error::InvalidParameter(
            "record_dataset needs record_trajectory = true".into(),
        ));
    }
    let (_, mut trace) = gmres_solve(a, b, m, cfg)?;
    let snaps = std::mem::take(&mut trace.snapshots);
    Ok((snaps, trace))
}
