//! A small reverse-mode differentiation tape over dense 2-D tensors.
//!
//! Values are `nalgebra` matrices; vectors are `n x 1`. Sparse matrices
//! only ever appear as constants ([`Var::spmm`]). Operations are recorded in
//! call order, so the recording order is a topological order and the
//! backward pass is a single reverse sweep.
//!
//! ```
//! use npo_neural::autodiff::Tape;
//! use nalgebra::DMatrix;
//!
//! let tape = Tape::new();
//! let x = tape.param(DMatrix::from_column_slice(2, 1, &[1.0, 2.0]));
//! let loss = x.sum_squares();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().as_slice(), &[2.0, 4.0]);
//! ```

use crate::error::{NeuralError, Result};
use nalgebra::DMatrix;
use npo_core::CsrMatrix;
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

pub type Mat = DMatrix<f64>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    /// `a * s` with `s` a differentiable `1 x 1` tensor.
    ScaleVar(usize, usize),
    /// `a[i, j] * v[i]` for a column vector `v`.
    MulCol(usize, usize),
    /// `a[i, j] + b[j]` for a row vector `b`.
    AddRow(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    SpMM(Arc<CsrMatrix>, usize),
    Relu(usize),
    /// Softmax along each row of `x / tau`. Masked entries are zero in
    /// the output, which is all the backward pass needs to know.
    SoftmaxRows { x: usize, tau: f64 },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize, usize),
    SumSquares(usize),
    Sum(usize),
    Mean(usize),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    /// Incremented on every `backward`, which invalidates older handles.
    generation: RefCell<u64>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    generation: u64,
}

/// Gradients of a scalar with respect to every node that requires them.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Mat>,
    generation: u64,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Mat> {
        if v.generation != self.generation {
            return None;
        }
        self.grads.get(&v.id)
    }
}

fn shape(m: &Mat) -> (usize, usize) {
    (m.nrows(), m.ncols())
}

fn mismatch(op: &'static str, a: (usize, usize), b: (usize, usize)) -> NeuralError {
    NeuralError::Shape(format!("{op}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn generation(&self) -> u64 {
        *self.generation.borrow()
    }

    fn push(&self, value: Mat, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
            generation: self.generation(),
        }
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf.
    pub fn constant(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value_of(&self, v: &Var<'_>) -> std::cell::Ref<'_, Mat> {
        assert!(self.check(*v).is_ok(), "stale Var: its tape was cleared by backward()");
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[v.id].value)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse sweep from the scalar `loss`. The tape is cleared afterwards
    /// and every existing [`Var`] becomes stale.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check(loss)?;
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let generation = self.generation();
        *self.generation.borrow_mut() += 1;
        let out = shape(&nodes[loss.id].value);
        if out != (1, 1) {
            return Err(NeuralError::Shape(format!(
                "backward needs a scalar loss, got {}x{}",
                out.0, out.1
            )));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Mat::from_element(1, 1, 1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let contributions = local_grads(&nodes, node, &g);
            grads[id] = Some(g);
            for (pid, pg) in contributions {
                if !nodes[pid].requires_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => *acc += pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .filter_map(|(i, g)| match (&nodes[i].op, g) {
                (Op::Leaf, Some(g)) if nodes[i].requires_grad => Some((i, g)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, generation })
    }

    fn check(&self, v: Var<'_>) -> Result<()> {
        if !std::ptr::eq(v.tape, self) || v.generation != self.generation() {
            return Err(NeuralError::StaleVar);
        }
        Ok(())
    }
}

fn local_grads(nodes: &[Node], node: &Node, g: &Mat) -> Vec<(usize, Mat)> {
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, -g)],
        Op::Mul(a, b) => vec![(*a, g.component_mul(val(*b))), (*b, g.component_mul(val(*a)))],
        Op::Scale(a, s) => vec![(*a, g * *s)],
        Op::ScaleVar(a, s) => {
            let sv = val(*s)[(0, 0)];
            let ds = g.dot(val(*a));
            vec![(*a, g * sv), (*s, Mat::from_element(1, 1, ds))]
        }
        Op::MulCol(a, v) => {
            let (av, vv) = (val(*a), val(*v));
            let mut ga = g.clone();
            for (i, mut row) in ga.row_iter_mut().enumerate() {
                row *= vv[(i, 0)];
            }
            let gv = Mat::from_iterator(vv.nrows(), 1, (0..vv.nrows()).map(|i| g.row(i).dot(&av.row(i))));
            vec![(*a, ga), (*v, gv)]
        }
        Op::AddRow(a, b) => {
            let gb = Mat::from_iterator(1, g.ncols(), g.column_iter().map(|c| c.sum()));
            vec![(*a, g.clone()), (*b, gb)]
        }
        Op::MatMul(a, b) => vec![(*a, g * val(*b).transpose()), (*b, val(*a).transpose() * g)],
        Op::Transpose(a) => vec![(*a, g.transpose())],
        Op::SpMM(m, x) => vec![(*x, spmm_transpose(m, g))],
        Op::Relu(a) => {
            let av = val(*a);
            vec![(*a, g.zip_map(av, |gi, ai| if ai > 0.0 { gi } else { 0.0 }))]
        }
        Op::SoftmaxRows { x, tau, .. } => {
            // y = softmax(x/tau); dx = y ⊙ (g - <g, y>) / tau, row-wise
            let y = &node.value;
            let mut dx = Mat::zeros(y.nrows(), y.ncols());
            for i in 0..y.nrows() {
                let s = g.row(i).dot(&y.row(i));
                for j in 0..y.ncols() {
                    dx[(i, j)] = y[(i, j)] * (g[(i, j)] - s) / tau;
                }
            }
            vec![(*x, dx)]
        }
        Op::ConcatRows(ids) => {
            let mut off = 0;
            ids.iter()
                .map(|&i| {
                    let r = val(i).nrows();
                    let part = g.rows(off, r).into_owned();
                    off += r;
                    (i, part)
                })
                .collect()
        }
        Op::ConcatCols(ids) => {
            let mut off = 0;
            ids.iter()
                .map(|&i| {
                    let c = val(i).ncols();
                    let part = g.columns(off, c).into_owned();
                    off += c;
                    (i, part)
                })
                .collect()
        }
        Op::SliceCols(a, start, len) => {
            let av = val(*a);
            let mut ga = Mat::zeros(av.nrows(), av.ncols());
            ga.columns_mut(*start, *len).copy_from(g);
            vec![(*a, ga)]
        }
        Op::SumSquares(a) => vec![(*a, val(*a) * (2.0 * g[(0, 0)]))],
        Op::Sum(a) => {
            let av = val(*a);
            vec![(*a, Mat::from_element(av.nrows(), av.ncols(), g[(0, 0)]))]
        }
        Op::Mean(a) => {
            let av = val(*a);
            let k = (av.nrows() * av.ncols()) as f64;
            vec![(*a, Mat::from_element(av.nrows(), av.ncols(), g[(0, 0)] / k))]
        }
    }
}

/// `M * X` for sparse `M` and dense `X`.
pub fn spmm(m: &CsrMatrix, x: &Mat) -> Mat {
    let mut out = Mat::zeros(m.n_rows(), x.ncols());
    for c in 0..x.ncols() {
        let col = x.column(c);
        for i in 0..m.n_rows() {
            let (cols, vals) = m.row(i);
            out[(i, c)] = cols.iter().zip(vals).map(|(&j, &v)| v * col[j]).sum();
        }
    }
    out
}

/// `Mᵀ * X` for sparse `M` and dense `X`.
pub fn spmm_transpose(m: &CsrMatrix, x: &Mat) -> Mat {
    let mut out = Mat::zeros(m.n_cols(), x.ncols());
    for c in 0..x.ncols() {
        for i in 0..m.n_rows() {
            let xi = x[(i, c)];
            if xi == 0.0 {
                continue;
            }
            let (cols, vals) = m.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out[(j, c)] += v * xi;
            }
        }
    }
    out
}

/// Row-wise softmax of `x / tau` with optional mask (row-major, `true` = kept).
/// Rows whose mask is empty come out as zeros.
pub fn softmax_rows(x: &Mat, tau: f64, mask: Option<&[bool]>) -> Mat {
    let (r, c) = shape(x);
    let mut y = Mat::zeros(r, c);
    let keep = |i: usize, j: usize| mask.is_none_or(|m| m[i * c + j]);
    for i in 0..r {
        let mut mx = f64::NEG_INFINITY;
        for j in 0..c {
            if keep(i, j) {
                mx = mx.max(x[(i, j)] / tau);
            }
        }
        if mx == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for j in 0..c {
            if keep(i, j) {
                let e = (x[(i, j)] / tau - mx).exp();
                y[(i, j)] = e;
                total += e;
            }
        }
        for j in 0..c {
            y[(i, j)] /= total;
        }
    }
    y
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// # Panics
    /// If the tape has been cleared by `backward` since this var was made;
    /// see [`Var::try_value`].
    pub fn value(&self) -> Mat {
        self.tape.value_of(self).clone()
    }

    pub fn try_value(&self) -> Result<Mat> {
        self.tape.check(*self)?;
        Ok(self.value())
    }

    pub fn shape(&self) -> (usize, usize) {
        shape(&self.tape.value_of(self))
    }

    /// Scalar value of a `1 x 1` tensor.
    pub fn scalar(&self) -> f64 {
        self.tape.value_of(self)[(0, 0)]
    }

    fn unary(self, value: Mat, op: Op) -> Var<'t> {
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t>, value: Mat, op: Op) -> Var<'t> {
        let rg = self.tape.rg(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    fn same_shape(self, other: Var<'t>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(mismatch(op, a, b));
        }
        Ok(())
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.check(self)?;
        self.tape.check(other)?;
        self.same_shape(other, "add")?;
        let v = &*self.tape.value_of(&self) + &*self.tape.value_of(&other);
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.check(self)?;
        self.tape.check(other)?;
        self.same_shape(other, "sub")?;
        let v = &*self.tape.value_of(&self) - &*self.tape.value_of(&other);
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.check(self)?;
        self.tape.check(other)?;
        self.same_shape(other, "mul")?;
        let v = self.tape.value_of(&self).component_mul(&*self.tape.value_of(&other));
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = &*self.tape.value_of(&self) * s;
        self.unary(v, Op::Scale(self.id, s))
    }

    /// Multiplication by a differentiable scalar (`1 x 1`).
    pub fn scale_by(self, s: Var<'t>) -> Result<Var<'t>> {
        self.tape.check(self)?;
        self.tape.check(s)?;
        if s.shape() != (1, 1) {
            return Err(mismatch("scale_by", (1, 1), s.shape()));
        }
        let v = &*self.tape.value_of(&self) * s.scalar();
        Ok(self.binary(s, v, Op::ScaleVar(self.id, s.id)))
    }

    /// Scales row `i` by `v[i]` for a column vector `v`.
    pub fn mul_col(self, v: Var<'t>) -> Result<Var<'t>> {
        self.tape.check(self)?;
        self.tape.check(v)?;
        let (r, _) = self.shape();
        if v.shape() != (r, 1) {
            return Err(mismatch("mul_col", (r, 1), v.shape()));
        }
        let mut out = self.value();
        {
            let vv = self.tape.value_of(&v);
            for (i, mut row) in out.row_iter_mut().enumerate() {
                row *= vv[(i, 0)];
            }
        }
        Ok(self.binary(v, out, Op::MulCol(self.id, v.id)))
    }

    /// Adds the row vector `b` to every row.
    pub fn add_row(self, b: Var<'t>) -> Result<Var<'t>> {
        self.tape.check(self)?;
        self.tape.check(b)?;
        let (_, c) = self.shape();
        if b.shape() != (1, c) {
            return Err(mismatch("add_row", (1, c), b.shape()));
        }
        let mut out = self.value();
        {
            let bv = self.tape.value_of(&b);
            for mut row in out.row_iter_mut() {
                row += &*bv;
            }
        }
        Ok(self.binary(b, out, Op::AddRow(self.id, b.id)))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.check(self)?;
        self.tape.check(other)?;
        let (a, b) = (self.shape(), other.shape());
        if a.1 != b.0 {
            return Err(mismatch("matmul", a, b));
        }
        let v = &*self.tape.value_of(&self) * &*self.tape.value_of(&other);
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(self) -> Var<'t> {
        let v = self.tape.value_of(&self).transpose();
        self.unary(v, Op::Transpose(self.id))
    }

    /// `M * self` for a constant sparse matrix `M`.
    pub fn spmm(self, m: &Arc<CsrMatrix>) -> Result<Var<'t>> {
        self.tape.check(self)?;
        let (r, _) = self.shape();
        if m.n_cols() != r {
            return Err(mismatch("spmm", (m.n_rows(), m.n_cols()), self.shape()));
        }
        let v = spmm(m, &self.tape.value_of(&self));
        Ok(self.unary(v, Op::SpMM(m.clone(), self.id)))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.tape.value_of(&self).map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    /// Row-wise softmax of `self / tau`, max-shifted. `mask` is row-major
    /// over the tensor's entries; masked entries are excluded.
    pub fn softmax_rows(self, tau: f64, mask: Option<&[bool]>) -> Result<Var<'t>> {
        self.tape.check(self)?;
        let (r, c) = self.shape();
        if let Some(m) = &mask {
            if m.len() != r * c {
                return Err(NeuralError::Shape(format!("softmax mask has {} entries for {r}x{c}", m.len())));
            }
        }
        if !(tau > 0.0) {
            return Err(NeuralError::Config(format!("softmax temperature must be > 0, got {tau}")));
        }
        let v = softmax_rows(&self.tape.value_of(&self), tau, mask);
        Ok(self.unary(v, Op::SoftmaxRows { x: self.id, tau }))
    }

    /// Stacks tensors with equal column counts vertically.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| NeuralError::Shape("concat of nothing".into()))?;
        for p in parts {
            first.tape.check(*p)?;
        }
        let c = first.shape().1;
        let mut rows = 0;
        for p in parts {
            if p.shape().1 != c {
                return Err(mismatch("concat_rows", first.shape(), p.shape()));
            }
            rows += p.shape().0;
        }
        let mut out = Mat::zeros(rows, c);
        let mut off = 0;
        for p in parts {
            let v = p.tape.value_of(p);
            out.rows_mut(off, v.nrows()).copy_from(&*v);
            off += v.nrows();
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = first.tape.rg(&ids);
        Ok(first.tape.push(out, Op::ConcatRows(ids), rg))
    }

    /// Stacks tensors with equal row counts side by side.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| NeuralError::Shape("concat of nothing".into()))?;
        for p in parts {
            first.tape.check(*p)?;
        }
        let r = first.shape().0;
        let mut cols = 0;
        for p in parts {
            if p.shape().0 != r {
                return Err(mismatch("concat_cols", first.shape(), p.shape()));
            }
            cols += p.shape().1;
        }
        let mut out = Mat::zeros(r, cols);
        let mut off = 0;
        for p in parts {
            let v = p.tape.value_of(p);
            out.columns_mut(off, v.ncols()).copy_from(&*v);
            off += v.ncols();
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = first.tape.rg(&ids);
        Ok(first.tape.push(out, Op::ConcatCols(ids), rg))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        self.tape.check(self)?;
        let (r, c) = self.shape();
        if start + len > c {
            return Err(NeuralError::Shape(format!("columns {start}..{} of a {r}x{c} tensor", start + len)));
        }
        let v = self.tape.value_of(&self).columns(start, len).into_owned();
        Ok(self.unary(v, Op::SliceCols(self.id, start, len)))
    }

    pub fn sum_squares(self) -> Var<'t> {
        let v = self.tape.value_of(&self).norm_squared();
        self.unary(Mat::from_element(1, 1, v), Op::SumSquares(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        let v = self.tape.value_of(&self).sum();
        self.unary(Mat::from_element(1, 1, v), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let m = self.tape.value_of(&self);
        let v = m.sum() / (m.nrows() * m.ncols()) as f64;
        drop(m);
        self.unary(Mat::from_element(1, 1, v), Op::Mean(self.id))
    }
}
