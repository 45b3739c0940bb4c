//! Finite-difference assembly on uniform grids with homogeneous Dirichlet
//! boundaries eliminated, and Gaussian random field right-hand sides.

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use std::fmt;
use std::str::FromStr;

/// Diffusion coefficient field on the unit square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coefficient {
    Constant(f64),
    /// `mean * exp(amplitude * sin(2πx) sin(2πy))`; strictly positive for
    /// any finite parameters with `mean > 0`.
    Smooth { mean: f64, amplitude: f64 },
}

impl Coefficient {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match *self {
            Coefficient::Constant(d) => d,
            Coefficient::Smooth { mean, amplitude } => {
                use std::f64::consts::TAU;
                mean * (amplitude * (TAU * x).sin() * (TAU * y).sin()).exp()
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Coefficient::Constant(d) => d > 0.0 && d.is_finite(),
            Coefficient::Smooth { mean, amplitude } => {
                mean > 0.0 && mean.is_finite() && amplitude.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "diffusion coefficient must be strictly positive: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PdeFamily {
    Poisson1D,
    Poisson2D,
    /// One backward-Euler step of the diffusion equation, `(I/dt + L)`.
    /// `dt = f64::INFINITY` gives the steady operator.
    Diffusion2D { coefficient: Coefficient, dt: f64 },
    /// Plane-strain Navier–Cauchy operator with Lamé parameters.
    Elasticity2D { lambda: f64, mu: f64 },
}

impl PdeFamily {
    pub fn diffusion_default() -> Self {
        PdeFamily::Diffusion2D {
            coefficient: Coefficient::Constant(1.0),
            dt: 1.0,
        }
    }

    pub fn elasticity_default() -> Self {
        PdeFamily::Elasticity2D {
            lambda: 1.0,
            mu: 1.0,
        }
    }

    pub fn dims(&self) -> usize {
        match self {
            PdeFamily::Poisson1D => 1,
            _ => 2,
        }
    }

    /// Unknowns per grid node.
    pub fn dofs_per_node(&self) -> usize {
        match self {
            PdeFamily::Elasticity2D { .. } => 2,
            _ => 1,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            PdeFamily::Diffusion2D { coefficient, dt } => {
                coefficient.validate()?;
                if !(dt > 0.0) {
                    return Err(Error::InvalidParameter(format!("dt must be > 0, got {dt}")));
                }
            }
            PdeFamily::Elasticity2D { lambda, mu }
                if !(mu > 0.0 && lambda >= 0.0) => {
                    return Err(Error::InvalidParameter(format!(
                        "Lamé parameters need mu > 0 and lambda >= 0 (lambda={lambda}, mu={mu})"
                    )));
                }
            _ => {}
        }
        Ok(())
    }
}

impl fmt::Display for PdeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PdeFamily::Poisson1D => "poisson1d",
            PdeFamily::Poisson2D => "poisson2d",
            PdeFamily::Diffusion2D { .. } => "diffusion2d",
            PdeFamily::Elasticity2D { .. } => "elasticity2d",
        })
    }
}

impl FromStr for PdeFamily {
    type Err = Error;

    /// Parses the family tag; parameterized families get their defaults.
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "poisson1d" | "poisson" => Ok(PdeFamily::Poisson1D),
            "poisson2d" => Ok(PdeFamily::Poisson2D),
            "diffusion2d" | "diffusion" => Ok(PdeFamily::diffusion_default()),
            "elasticity2d" | "elasticity" => Ok(PdeFamily::elasticity_default()),
            other => Err(Error::InvalidParameter(format!("unknown PDE family `{other}`"))),
        }
    }
}

/// Uniform grid of interior points. Coordinates of interior node `i` along
/// an axis are `(i + 1) * spacing`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    sizes: Vec<usize>,
    spacing: f64,
}

impl GridSpec {
    pub fn new(sizes: Vec<usize>, spacing: f64) -> Result<Self> {
        if sizes.is_empty() || sizes.len() > 2 {
            return Err(Error::InvalidParameter(format!(
                "grid must be 1D or 2D, got {} axes",
                sizes.len()
            )));
        }
        if sizes.iter().any(|&s| s < 2) {
            return Err(Error::InvalidParameter("grid sizes must be >= 2".into()));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::InvalidParameter(format!("spacing must be > 0, got {spacing}")));
        }
        Ok(Self { sizes, spacing })
    }

    /// `n` interior points on the unit interval, `h = 1/(n+1)`.
    pub fn unit_1d(n: usize) -> Result<Self> {
        Self::new(vec![n], 1.0 / (n as f64 + 1.0))
    }

    /// `n x n` interior points on the unit square.
    pub fn unit_2d(n: usize) -> Result<Self> {
        Self::new(vec![n, n], 1.0 / (n as f64 + 1.0))
    }

    pub fn dims(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn num_nodes(&self) -> usize {
        self.sizes.iter().product()
    }

    /// Node coordinates scaled to `[0, 1]` per axis (first axis fastest).
    pub fn normalized_coords(&self, node: usize) -> [f64; 2] {
        let nx = self.sizes[0];
        let (ix, iy) = (node % nx, node / nx);
        let fx = (ix as f64 + 1.0) / (nx as f64 + 1.0);
        let fy = if self.dims() == 2 {
            (iy as f64 + 1.0) / (self.sizes[1] as f64 + 1.0)
        } else {
            0.0
        };
        [fx, fy]
    }
}

/// Assembles the SPD system matrix for `family` on `grid`.
pub fn assemble(family: &PdeFamily, grid: &GridSpec) -> Result<CsrMatrix> {
    family.validate()?;
    if family.dims() != grid.dims() {
        return Err(Error::IncompatibleGrid(format!(
            "{family} needs a {}D grid, got {}D",
            family.dims(),
            grid.dims()
        )));
    }
    let h = grid.spacing();
    match *family {
        PdeFamily::Poisson1D => Ok(poisson_1d(grid.sizes()[0], h)),
        PdeFamily::Poisson2D => Ok(diffusion_2d(grid, &Coefficient::Constant(1.0), 0.0)),
        PdeFamily::Diffusion2D { coefficient, dt } => Ok(diffusion_2d(grid, &coefficient, 1.0 / dt)),
        PdeFamily::Elasticity2D { lambda, mu } => Ok(elasticity_2d(grid, lambda, mu)),
    }
}

fn poisson_1d(n: usize, h: f64) -> CsrMatrix {
    let s = 1.0 / (h * h);
    let mut t = Vec::with_capacity(3 * n);
    for i in 0..n {
        if i > 0 {
            t.push((i, i - 1, -s));
        }
        t.push((i, i, 2.0 * s));
        if i + 1 < n {
            t.push((i, i + 1, -s));
        }
    }
    CsrMatrix::from_triplets(n, n, t).expect("stencil indices in range")
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// `shift * I - div(D grad u)` on the 5-point stencil with harmonic-mean
/// face coefficients. Boundary nodes contribute to the diagonal only.
fn diffusion_2d(grid: &GridSpec, coef: &Coefficient, shift: f64) -> CsrMatrix {
    let (nx, ny) = (grid.sizes()[0], grid.sizes()[1]);
    let h = grid.spacing();
    let s = 1.0 / (h * h);
    // Coefficient at padded node (ix, iy) in 0..=nx+1.
    let d = |ix: usize, iy: usize| coef.eval(ix as f64 * h, iy as f64 * h);
    let idx = |ix: usize, iy: usize| (ix - 1) + nx * (iy - 1);
    let mut t = Vec::with_capacity(5 * nx * ny);
    for iy in 1..=ny {
        for ix in 1..=nx {
            let row = idx(ix, iy);
            let here = d(ix, iy);
            let mut diag = shift;
            for (jx, jy) in [(ix - 1, iy), (ix + 1, iy), (ix, iy - 1), (ix, iy + 1)] {
                let w = harmonic(here, d(jx, jy)) * s;
                diag += w;
                let interior = (1..=nx).contains(&jx) && (1..=ny).contains(&jy);
                if interior {
                    t.push((row, idx(jx, jy), -w));
                }
            }
            t.push((row, row, diag));
        }
    }
    let n = nx * ny;
    CsrMatrix::from_triplets(n, n, t).expect("stencil indices in range")
}

/// Negated Navier–Cauchy operator `-(mu Δu + (lambda+mu) grad div u)` with
/// unknowns interleaved per node as `(u, v)`. The mixed derivative uses the
/// 4-corner central stencil, which is symmetric between the two blocks.
fn elasticity_2d(grid: &GridSpec, lambda: f64, mu: f64) -> CsrMatrix {
    let (nx, ny) = (grid.sizes()[0], grid.sizes()[1]);
    let h = grid.spacing();
    let s = 1.0 / (h * h);
    let axial = (lambda + 2.0 * mu) * s;
    let shear = mu * s;
    let cross = (lambda + mu) * s / 4.0;
    let node = |ix: i64, iy: i64| -> Option<usize> {
        ((0..nx as i64).contains(&ix) && (0..ny as i64).contains(&iy))
            .then(|| ix as usize + nx * iy as usize)
    };
    let mut t = Vec::with_capacity(18 * nx * ny);
    for iy in 0..ny as i64 {
        for ix in 0..nx as i64 {
            let p = node(ix, iy).unwrap();
            let (u, v) = (2 * p, 2 * p + 1);
            // u row: -(axial) u_xx - (shear) u_yy ; v row: -(shear) v_xx - (axial) v_yy
            t.push((u, u, 2.0 * axial + 2.0 * shear));
            t.push((v, v, 2.0 * shear + 2.0 * axial));
            for (dx, dy) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                if let Some(q) = node(ix + dx, iy + dy) {
                    let (wu, wv) = if dx != 0 { (axial, shear) } else { (shear, axial) };
                    t.push((u, 2 * q, -wu));
                    t.push((v, 2 * q + 1, -wv));
                }
            }
            // -(lambda+mu) v_xy in the u row and -(lambda+mu) u_xy in the v row.
            for (dx, dy) in [(1, 1), (-1, -1), (1, -1), (-1, 1)] {
                if let Some(q) = node(ix + dx, iy + dy) {
                    let sign = (dx * dy) as f64;
                    t.push((u, 2 * q + 1, -sign * cross));
                    t.push((v, 2 * q, -sign * cross));
                }
            }
        }
    }
    let n = 2 * nx * ny;
    CsrMatrix::from_triplets(n, n, t).expect("stencil indices in range")
}

/// Squared-exponential Gaussian random field parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrfSpec {
    pub length_scale: f64,
    pub variance: f64,
    pub seed: u64,
}

impl GrfSpec {
    pub fn new(length_scale: f64, variance: f64, seed: u64) -> Result<Self> {
        if !(length_scale > 0.0 && length_scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "length_scale must be > 0, got {length_scale}"
            )));
        }
        if !(variance >= 0.0 && variance.is_finite()) {
            return Err(Error::InvalidParameter(format!("variance must be >= 0, got {variance}")));
        }
        Ok(Self {
            length_scale,
            variance,
            seed,
        })
    }
}

/// Eigenvalues of the periodic embedding of the 1D covariance of `n`
/// points with spacing `h`. The embedding length is doubled until the
/// spectrum is numerically nonnegative; remaining tiny negatives are clipped.
fn embedding_spectrum(n: usize, h: f64, length_scale: f64, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let mut len = (2 * n).next_power_of_two();
    loop {
        let mut c: Vec<Complex64> = (0..len)
            .map(|k| {
                let d = k.min(len - k) as f64 * h;
                Complex64::new((-d * d / (2.0 * length_scale * length_scale)).exp(), 0.0)
            })
            .collect();
        planner.plan_fft_forward(len).process(&mut c);
        let lam: Vec<f64> = c.iter().map(|z| z.re).collect();
        let max = lam.iter().cloned().fold(0.0, f64::max);
        let min = lam.iter().cloned().fold(f64::INFINITY, f64::min);
        if min >= -1e-10 * max || len >= 64 * n.next_power_of_two() {
            return lam.into_iter().map(|l| l.max(0.0)).collect();
        }
        len *= 2;
    }
}

/// Samples a zero-mean stationary field with covariance
/// `variance * exp(-d² / (2 length_scale²))` at the grid nodes.
///
/// 1D uses circulant embedding; 2D uses the separable product of the two
/// axis embeddings with a 2D FFT. Deterministic in `spec.seed`.
pub fn sample_grf(grid: &GridSpec, spec: &GrfSpec) -> Vec<f64> {
    let n_nodes = grid.num_nodes();
    if spec.variance == 0.0 {
        return vec![0.0; n_nodes];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut planner = FftPlanner::new();
    let h = grid.spacing();
    let sizes = grid.sizes();
    let lam_x = embedding_spectrum(sizes[0], h, spec.length_scale, &mut planner);
    let lx = lam_x.len();
    let sd = spec.variance.sqrt();

    if grid.dims() == 1 {
        let fft = planner.plan_fft_forward(lx);
        let mut w: Vec<Complex64> = lam_x
            .iter()
            .map(|&l| {
                let (a, b): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
                Complex64::new(a, b) * (l / lx as f64).sqrt()
            })
            .collect();
        fft.process(&mut w);
        return w[..sizes[0]].iter().map(|z| sd * z.re).collect();
    }

    let lam_y = embedding_spectrum(sizes[1], h, spec.length_scale, &mut planner);
    let ly = lam_y.len();
    let total = (lx * ly) as f64;
    // Row-major in y: element (ix, iy) at iy * lx + ix.
    let mut w: Vec<Complex64> = (0..lx * ly)
        .map(|k| {
            let (ix, iy) = (k % lx, k / lx);
            let (a, b): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
            Complex64::new(a, b) * (lam_x[ix] * lam_y[iy] / total).sqrt()
        })
        .collect();
    let fx = planner.plan_fft_forward(lx);
    for row in w.chunks_mut(lx) {
        fx.process(row);
    }
    let fy = planner.plan_fft_forward(ly);
    let mut col = vec![Complex64::new(0.0, 0.0); ly];
    for ix in 0..lx {
        for iy in 0..ly {
            col[iy] = w[iy * lx + ix];
        }
        fy.process(&mut col);
        for iy in 0..ly {
            w[iy * lx + ix] = col[iy];
        }
    }
    let (nx, ny) = (sizes[0], sizes[1]);
    (0..nx * ny)
        .map(|k| sd * w[(k / nx) * lx + k % nx].re)
        .collect()
}

/// Right-hand side for a family with `family.dofs_per_node()` unknowns per
/// node: one independent field per component, interleaved per node.
pub fn sample_rhs(family: &PdeFamily, grid: &GridSpec, spec: &GrfSpec) -> Vec<f64> {
    let dofs = family.dofs_per_node();
    if dofs == 1 {
        return sample_grf(grid, spec);
    }
    let fields: Vec<Vec<f64>> = (0..dofs as u64)
        .map(|c| {
            let seed = spec.seed ^ c.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            sample_grf(grid, &GrfSpec { seed, ..*spec })
        })
        .collect();
    (0..grid.num_nodes() * dofs).map(|k| fields[k % dofs][k / dofs]).collect()
}
