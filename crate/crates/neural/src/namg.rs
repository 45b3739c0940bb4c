//! Neural algebraic multigrid (NAMG) preconditioner.
//!
//! The network acts on a residual `r` in five stages: pre-relaxation,
//! lifting to fine tokens, attention-weighted restriction to `m` coarse
//! tokens, coarse self-attention, prolongation and projection back to one
//! value per node, then post-relaxation.
//!
//! The attention weights (restriction scores and coarse attention) are
//! computed from *structure tokens* that depend only on `A` and the grid,
//! and the residual enters the fine tokens multiplicatively. The resulting
//! operator is linear in `r`, which is what left-preconditioned GMRES
//! needs to reach tight tolerances. Because of that linearity the token
//! pipeline collapses into a handful of matrix-vector products; [`forward`]
//! evaluates that fused form for a batch of residuals and is what training
//! and solving use. [`forward_tokens`] runs the literal stage-by-stage
//! pipeline and exists for inspection and cross-checking.

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{NeuralError, Result};
use npo_core::{CsrMatrix, GridSpec, Preconditioner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::sync::Arc;

/// Per-node structural features: scaled diagonal, row-sum ratio, x, y.
pub const NUM_FEATURES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NamgConfig {
    pub feature_width: usize,
    pub num_coarse: usize,
    pub num_heads: usize,
    pub pre_sweeps: usize,
    pub post_sweeps: usize,
    pub activation: Activation,
    pub temperature: f64,
    pub damping: f64,
    /// `false` bypasses the network, leaving only the relaxation sweeps.
    pub use_network: bool,
    /// `false` zeroes the features derived from `A`.
    pub use_matrix_features: bool,
}

impl Default for NamgConfig {
    fn default() -> Self {
        Self {
            feature_width: 32,
            num_coarse: 128,
            num_heads: 4,
            pre_sweeps: 1,
            post_sweeps: 1,
            activation: Activation::Relu,
            temperature: 32f64.sqrt(),
            damping: 2.0 / 3.0,
            use_network: true,
            use_matrix_features: true,
        }
    }
}

impl NamgConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NeuralError::Config(m));
        if self.feature_width == 0 || self.num_heads == 0 || !self.feature_width.is_multiple_of(self.num_heads) {
            return bad(format!(
                "feature width {} must be a positive multiple of the head count {}",
                self.feature_width, self.num_heads
            ));
        }
        if self.num_coarse == 0 {
            return bad("need at least one coarse token".into());
        }
        if !(self.temperature > 0.0) || !self.damping.is_finite() {
            return bad(format!("temperature {} / damping {}", self.temperature, self.damping));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.feature_width / self.num_heads
    }
}

/// Parameter names in checkpoint order.
pub const PARAM_NAMES: [&str; 8] = ["w_lift", "b_lift", "w_coarse", "w_q", "w_k", "w_v", "w_project", "omega"];

#[derive(Debug, Clone, PartialEq)]
pub struct NamgModel {
    pub config: NamgConfig,
    /// Indexed like [`PARAM_NAMES`].
    params: Vec<Mat>,
}

impl NamgModel {
    /// Uniform(±1/sqrt(fan_in)) weights, zero bias, damping from the config.
    pub fn new(config: NamgConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.feature_width;
        let mut uniform = |r: usize, cols: usize, fan_in: usize| {
            let b = 1.0 / (fan_in as f64).sqrt();
            Mat::from_fn(r, cols, |_, _| rng.random_range(-b..b))
        };
        let params = vec![
            uniform(c, NUM_FEATURES, NUM_FEATURES),
            Mat::zeros(1, c),
            uniform(config.num_coarse, c, c),
            uniform(c, c, c),
            uniform(c, c, c),
            uniform(c, c, c),
            uniform(1, c, c),
            Mat::from_element(1, 1, config.damping),
        ];
        Ok(Self { config, params })
    }

    pub fn expected_shape(config: &NamgConfig, name: &str) -> Option<(usize, usize)> {
        let c = config.feature_width;
        Some(match name {
            "w_lift" => (c, NUM_FEATURES),
            "b_lift" => (1, c),
            "w_coarse" => (config.num_coarse, c),
            "w_q" | "w_k" | "w_v" => (c, c),
            "w_project" => (1, c),
            "omega" => (1, 1),
            _ => return None,
        })
    }

    /// Builds a model from named tensors, checking names and shapes.
    pub fn from_params(config: NamgConfig, named: Vec<(String, Mat)>) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::with_capacity(PARAM_NAMES.len());
        for name in PARAM_NAMES {
            let (_, m) = named
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| NeuralError::Checkpoint(format!("missing parameter {name}")))?;
            let want = Self::expected_shape(&config, name).expect("known name");
            if (m.nrows(), m.ncols()) != want {
                return Err(NeuralError::Checkpoint(format!(
                    "{name} has shape {}x{}, expected {}x{}",
                    m.nrows(),
                    m.ncols(),
                    want.0,
                    want.1
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(NeuralError::NonFinite(name.into()));
            }
            params.push(m.clone());
        }
        if named.len() != PARAM_NAMES.len() {
            return Err(NeuralError::Checkpoint(format!("expected {} tensors, got {}", PARAM_NAMES.len(), named.len())));
        }
        Ok(Self { config, params })
    }

    pub fn params(&self) -> &[Mat] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Mat] {
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&'static str, &Mat)> {
        PARAM_NAMES.iter().copied().zip(&self.params)
    }

    pub fn param(&self, name: &str) -> Option<&Mat> {
        PARAM_NAMES.iter().position(|n| *n == name).map(|i| &self.params[i])
    }

    /// Records every parameter on `tape`, as differentiable leaves when
    /// `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let leaf = |m: &Mat| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) };
        let v: Vec<Var<'t>> = self.params.iter().map(leaf).collect();
        Bound {
            w_lift: v[0],
            b_lift: v[1],
            w_coarse: v[2],
            w_q: v[3],
            w_k: v[4],
            w_v: v[5],
            w_project: v[6],
            omega: v[7],
        }
    }
}

/// Model parameters recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct Bound<'t> {
    pub w_lift: Var<'t>,
    pub b_lift: Var<'t>,
    pub w_coarse: Var<'t>,
    pub w_q: Var<'t>,
    pub w_k: Var<'t>,
    pub w_v: Var<'t>,
    pub w_project: Var<'t>,
    pub omega: Var<'t>,
}

impl<'t> Bound<'t> {
    /// Handles in [`PARAM_NAMES`] order.
    pub fn all(&self) -> [Var<'t>; 8] {
        [self.w_lift, self.b_lift, self.w_coarse, self.w_q, self.w_k, self.w_v, self.w_project, self.omega]
    }
}

/// Everything about one system matrix that the network needs, built once
/// and shared by every residual.
#[derive(Debug, Clone)]
pub struct Structure {
    pub a: Arc<CsrMatrix>,
    /// `D^{-1/2} A D^{-1/2}`, used in place of `A` inside the prolongation.
    pub a_hat: Arc<CsrMatrix>,
    /// `D^{-1}` as an `n x 1` column.
    pub inv_diag: Mat,
    /// `n x NUM_FEATURES`.
    pub features: Mat,
    /// Support of coarse token `j` over fine node `i` at `j * n + i`.
    pub mask: Vec<bool>,
    pub anchors: Vec<usize>,
}

impl Structure {
    pub fn new(a: Arc<CsrMatrix>, grid: &GridSpec, config: &NamgConfig) -> Result<Self> {
        config.validate()?;
        let n = a.n_rows();
        if !a.is_square() || n == 0 {
            return Err(npo_core::Error::NotSquare { rows: a.n_rows(), cols: a.n_cols() }.into());
        }
        let nodes = grid.num_nodes();
        if !n.is_multiple_of(nodes) {
            return Err(NeuralError::Shape(format!("{n} unknowns on a grid of {nodes} nodes")));
        }
        let dofs = n / nodes;
        let diag = a.diagonal();
        if let Some(i) = diag.iter().position(|&d| !(d > 0.0)) {
            return Err(npo_core::Error::ZeroDiagonal(i).into());
        }
        let dmax = diag.iter().cloned().fold(0.0, f64::max);
        let mut features = Mat::zeros(n, NUM_FEATURES);
        for i in 0..n {
            let (_, vals) = a.row(i);
            let xy = grid.normalized_coords(i / dofs);
            if config.use_matrix_features {
                features[(i, 0)] = diag[i] / dmax;
                features[(i, 1)] = vals.iter().map(|v| v.abs()).sum::<f64>() / diag[i];
            }
            features[(i, 2)] = xy[0];
            features[(i, 3)] = xy[1];
        }
        let s: Vec<f64> = diag.iter().map(|d| 1.0 / d.sqrt()).collect();
        let a_hat = CsrMatrix::from_triplets(n, n, a.triplets().map(|(i, j, v)| (i, j, s[i] * v * s[j])))?;
        let inv_diag = Mat::from_iterator(n, 1, diag.iter().map(|d| 1.0 / d));
        let (anchors, mask) = coarse_support(&a, config.num_coarse);
        Ok(Self {
            a,
            a_hat: Arc::new(a_hat),
            inv_diag,
            features,
            mask,
            anchors,
        })
    }

    pub fn n(&self) -> usize {
        self.a.n_rows()
    }

    /// Effective coarse-token count, `min(num_coarse, n)`.
    pub fn m(&self) -> usize {
        self.anchors.len()
    }
}

/// Anchors at uniform stride and their supports: every node within graph
/// distance `max(2, ceil(stride))` of the anchor, plus any node whose
/// nearest anchor it is, so that every fine node is covered.
fn coarse_support(a: &CsrMatrix, num_coarse: usize) -> (Vec<usize>, Vec<bool>) {
    let n = a.n_rows();
    let m = num_coarse.min(n);
    let stride = n as f64 / m as f64;
    let anchors: Vec<usize> = (0..m).map(|j| (((j as f64 + 0.5) * stride) as usize).min(n - 1)).collect();
    let radius = (stride.ceil() as usize).max(2);
    let mut mask = vec![false; m * n];
    let mut dist = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for (j, &root) in anchors.iter().enumerate() {
        let mut seen = vec![root];
        dist[root] = 0;
        queue.push_back(root);
        while let Some(u) = queue.pop_front() {
            mask[j * n + u] = true;
            if dist[u] == radius {
                continue;
            }
            for &v in a.row(u).0 {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    seen.push(v);
                    queue.push_back(v);
                }
            }
        }
        for v in seen {
            dist[v] = usize::MAX;
        }
    }
    // Multi-source sweep for nodes outside every ball.
    let mut owner = vec![usize::MAX; n];
    for (j, &root) in anchors.iter().enumerate() {
        if owner[root] == usize::MAX {
            owner[root] = j;
            queue.push_back(root);
        }
    }
    while let Some(u) = queue.pop_front() {
        for &v in a.row(u).0 {
            if owner[v] == usize::MAX {
                owner[v] = owner[u];
                queue.push_back(v);
            }
        }
    }
    for (i, &j) in owner.iter().enumerate() {
        if j != usize::MAX {
            mask[j * n + i] = true;
        }
    }
    (anchors, mask)
}

/// `relu(features · W_liftᵀ + b_lift)`, `n x C`.
pub fn structure_tokens<'t>(p: &Bound<'t>, s: &Structure) -> Result<Var<'t>> {
    let f = p.w_lift.tape().constant(s.features.clone());
    Ok(f.matmul(p.w_lift.transpose())?.add_row(p.b_lift)?.relu())
}

/// Fine tokens `x^f = r ⊙ G` for a residual column `r`.
pub fn lift<'t>(g: Var<'t>, r: Var<'t>) -> Result<Var<'t>> {
    g.mul_col(r)
}

/// Restriction weights `E`, `n x m`; each column is a softmax over its
/// support of the scores `G · W_coarse[:m]ᵀ / τ`.
pub fn attention_weights<'t>(p: &Bound<'t>, s: &Structure, config: &NamgConfig, g: Var<'t>) -> Result<Var<'t>> {
    let wc = p.w_coarse.transpose().slice_cols(0, s.m())?;
    let scores_t = g.matmul(wc)?.transpose();
    Ok(scores_t.softmax_rows(config.temperature, Some(&s.mask))?.transpose())
}

/// Returns the prolongation `P = Â E` and the coarse tokens `Pᵀ x^f`.
pub fn restrict<'t>(s: &Structure, e: Var<'t>, xf: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let p = e.spmm(&s.a_hat)?;
    let xc = p.transpose().matmul(xf)?;
    Ok((p, xc))
}

/// Per-head coarse attention matrices `softmax(q_h k_hᵀ / sqrt(d))`. Queries
/// and keys come from the coarse structure tokens `Eᵀ G`.
pub fn coarse_scores<'t>(p: &Bound<'t>, config: &NamgConfig, e: Var<'t>, g: Var<'t>) -> Result<Vec<Var<'t>>> {
    let gc = e.transpose().matmul(g)?;
    let q = gc.matmul(p.w_q.transpose())?;
    let k = gc.matmul(p.w_k.transpose())?;
    let d = config.head_dim();
    (0..config.num_heads)
        .map(|h| {
            let qh = q.slice_cols(h * d, d)?;
            let kh = k.slice_cols(h * d, d)?;
            qh.matmul(kh.transpose())?.softmax_rows((d as f64).sqrt(), None)
        })
        .collect()
}

/// `x^c + concat_h(T_h v_h)` with `v = x^c W_vᵀ`.
pub fn coarse_attention<'t>(p: &Bound<'t>, config: &NamgConfig, scores: &[Var<'t>], xc: Var<'t>) -> Result<Var<'t>> {
    let v = xc.matmul(p.w_v.transpose())?;
    let d = config.head_dim();
    let heads: Vec<Var<'t>> = scores
        .iter()
        .enumerate()
        .map(|(h, t)| t.matmul(v.slice_cols(h * d, d)?))
        .collect::<Result<_>>()?;
    xc.add(Var::concat_cols(&heads)?)
}

/// `x'^f = x^f + P x'^c`.
pub fn prolong<'t>(p: Var<'t>, xf: Var<'t>, xc: Var<'t>) -> Result<Var<'t>> {
    xf.add(p.matmul(xc)?)
}

/// One value per node: `x'^f W_projectᵀ`.
pub fn project<'t>(p: &Bound<'t>, xf: Var<'t>) -> Result<Var<'t>> {
    xf.matmul(p.w_project.transpose())
}

/// Damped Jacobi sweeps `z ← z + ω D⁻¹ (r − A z)` applied column-wise.
pub fn relax<'t>(s: &Structure, z: Var<'t>, r: Var<'t>, sweeps: usize, omega: Var<'t>) -> Result<Var<'t>> {
    let mut z = z;
    for _ in 0..sweeps {
        let step = r.sub(z.spmm(&s.a)?)?.mul_col(inv_diag(s, r))?;
        z = z.add(step.scale_by(omega)?)?;
    }
    Ok(z)
}

fn inv_diag<'t>(s: &Structure, like: Var<'t>) -> Var<'t> {
    like.tape().constant(s.inv_diag.clone())
}

/// The stage-by-stage pipeline for a single residual column.
pub fn forward_tokens<'t>(p: &Bound<'t>, s: &Structure, config: &NamgConfig, r: Var<'t>) -> Result<Var<'t>> {
    if r.shape() != (s.n(), 1) {
        return Err(NeuralError::Shape(format!("residual {:?} for n = {}", r.shape(), s.n())));
    }
    let zero = r.tape().constant(Mat::zeros(s.n(), 1));
    let mut z = relax(s, zero, r, config.pre_sweeps, p.omega)?;
    if config.use_network {
        let r_hat = r.sub(z.spmm(&s.a)?)?.mul_col(inv_diag(s, r))?;
        let g = structure_tokens(p, s)?;
        let xf = lift(g, r_hat)?;
        let e = attention_weights(p, s, config, g)?;
        let (pm, xc) = restrict(s, e, xf)?;
        let scores = coarse_scores(p, config, e, g)?;
        let xc = coarse_attention(p, config, &scores, xc)?;
        let xf = prolong(pm, xf, xc)?;
        z = z.add(project(p, xf)?)?;
    }
    relax(s, z, r, config.post_sweeps, p.omega)
}

/// Per-system quantities of the fused form: `P`, `a = G w_pᵀ`, the
/// per-head vectors `u_h = G W_v[h]ᵀ w_p[h]ᵀ` and attention matrices `T_h`.
pub struct Fused<'t> {
    pub p: Var<'t>,
    pub a: Var<'t>,
    pub u: Vec<Var<'t>>,
    pub t: Vec<Var<'t>>,
}

pub fn fused_operators<'t>(p: &Bound<'t>, s: &Structure, config: &NamgConfig) -> Result<Fused<'t>> {
    let g = structure_tokens(p, s)?;
    let e = attention_weights(p, s, config, g)?;
    let pm = e.spmm(&s.a_hat)?;
    let t = coarse_scores(p, config, e, g)?;
    let wp = p.w_project.transpose();
    let a = g.matmul(wp)?;
    let d = config.head_dim();
    let wvt = p.w_v.transpose();
    let u = (0..config.num_heads)
        .map(|h| {
            let uh = wvt.slice_cols(h * d, d)?.matmul(p.w_project.slice_cols(h * d, d)?.transpose())?;
            g.matmul(uh)
        })
        .collect::<Result<_>>()?;
    Ok(Fused { p: pm, a, u, t })
}

/// The network for a batch of residual columns `r` (`n x B`), evaluated in
/// fused form. Agrees with [`forward_tokens`] column by column.
pub fn forward<'t>(p: &Bound<'t>, s: &Structure, config: &NamgConfig, r: Var<'t>) -> Result<Var<'t>> {
    let (rows, _) = r.shape();
    if rows != s.n() {
        return Err(NeuralError::Shape(format!("residual batch has {rows} rows for n = {}", s.n())));
    }
    let zero = r.tape().constant(Mat::zeros(r.shape().0, r.shape().1));
    let mut z = relax(s, zero, r, config.pre_sweeps, p.omega)?;
    if config.use_network {
        let f = fused_operators(p, s, config)?;
        let r_hat = r.sub(z.spmm(&s.a)?)?.mul_col(inv_diag(s, r))?;
        let pt = f.p.transpose();
        let ra = r_hat.mul_col(f.a)?;
        let mut y = pt.matmul(ra)?;
        for (u, t) in f.u.iter().zip(&f.t) {
            y = y.add(t.matmul(pt.matmul(r_hat.mul_col(*u)?)?)?)?;
        }
        z = z.add(ra.add(f.p.matmul(y)?)?)?;
    }
    relax(s, z, r, config.post_sweeps, p.omega)
}

/// A trained model frozen against one matrix. Applying it needs no tape:
/// the fused operators are evaluated once at construction.
pub struct NamgPreconditioner {
    config: NamgConfig,
    a: Arc<CsrMatrix>,
    inv_diag: Vec<f64>,
    omega: f64,
    p: Mat,
    pt: Mat,
    a_vec: Mat,
    u: Vec<Mat>,
    t: Vec<Mat>,
}

impl NamgPreconditioner {
    pub fn new(model: &NamgModel, a: Arc<CsrMatrix>, grid: &GridSpec) -> Result<Self> {
        let s = Structure::new(a.clone(), grid, &model.config)?;
        Self::from_structure(model, &s)
    }

    pub fn from_structure(model: &NamgModel, s: &Structure) -> Result<Self> {
        let config = model.config.clone();
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let omega = bound.omega.scalar();
        let (p, a_vec, u, t) = if config.use_network {
            let f = fused_operators(&bound, s, &config)?;
            (f.p.value(), f.a.value(), f.u.iter().map(|v| v.value()).collect(), f.t.iter().map(|v| v.value()).collect())
        } else {
            (Mat::zeros(s.n(), 0), Mat::zeros(s.n(), 1), vec![], vec![])
        };
        let all: Vec<&Mat> = [&p, &a_vec].into_iter().chain(&u).chain(&t).collect();
        if all.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(NeuralError::NonFinite("NAMG operators".into()));
        }
        Ok(Self {
            pt: p.transpose(),
            p,
            config,
            a: s.a.clone(),
            inv_diag: s.inv_diag.iter().copied().collect(),
            omega,
            a_vec,
            u,
            t,
        })
    }

    fn sweep(&self, z: &mut [f64], r: &[f64], sweeps: usize) -> Result<()> {
        for _ in 0..sweeps {
            let az = self.a.spmv(z)?;
            for i in 0..z.len() {
                z[i] += self.omega * self.inv_diag[i] * (r[i] - az[i]);
            }
        }
        Ok(())
    }
}

impl Preconditioner for NamgPreconditioner {
    fn apply(&self, r: &[f64]) -> npo_core::Result<Vec<f64>> {
        let n = self.inv_diag.len();
        if r.len() != n {
            return Err(npo_core::Error::DimensionMismatch { expected: n, got: r.len() });
        }
        let mut z = vec![0.0; n];
        self.sweep(&mut z, r, self.config.pre_sweeps).map_err(to_core)?;
        if self.config.use_network {
            let az = self.a.spmv(&z)?;
            let r_hat: Vec<f64> = (0..n).map(|i| self.inv_diag[i] * (r[i] - az[i])).collect();
            let ra = Mat::from_iterator(n, 1, (0..n).map(|i| r_hat[i] * self.a_vec[i]));
            let mut y = &self.pt * &ra;
            for (u, t) in self.u.iter().zip(&self.t) {
                let ru = Mat::from_iterator(n, 1, (0..n).map(|i| r_hat[i] * u[i]));
                y += t * (&self.pt * ru);
            }
            let delta = ra + &self.p * y;
            for (zi, d) in z.iter_mut().zip(delta.iter()) {
                *zi += d;
            }
        }
        self.sweep(&mut z, r, self.config.post_sweeps).map_err(to_core)?;
        Ok(z)
    }

    fn claims_spd(&self) -> bool {
        false
    }

    fn describe(&self) -> String {
        "namg".into()
    }
}

fn to_core(e: NeuralError) -> npo_core::Error {
    match e {
        NeuralError::Core(c) => c,
        other => npo_core::Error::InvalidParameter(other.to_string()),
    }
}
