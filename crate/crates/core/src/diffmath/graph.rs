//! Recorded forward computation over a closed set of matrix primitives and
//! its reverse-mode gradient.

use std::sync::Arc;

use crate::diffmath::params::{ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::matrix::{dot, gemm_nn, gemm_nt, gemm_tn, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param { tag: u64, id: ParamId },
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    /// Same shape, or `b` a single row broadcast over `a`.
    Add(Var, Var),
    Sub(Var, Var),
    /// Same shape, or `b` a single row broadcast over `a`.
    Mul(Var, Var),
    Scale(Var, f64),
    /// Multiply by a 1×1 node.
    ScaleBy(Var, Var),
    Recip(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Sum(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    /// `out[o] = offset[o] + Σ coeff · x[i]` over flat indices.
    Weighted { x: Var, entries: Vec<(usize, usize, f64)> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
}

#[derive(Debug)]
struct Node {
    value: Arc<Matrix>,
    op: Op,
    needs_grad: bool,
}

/// A tape of primitive operations. Nodes are appended in evaluation order,
/// so every input index is below its consumer's.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, lhs: &Matrix, rhs: &Matrix) -> Error {
    Error::Shape { op, lhs: lhs.shape(), rhs: rhs.shape() }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, needs_grad)
    }

    fn push_shared(&mut self, value: Arc<Matrix>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; never receives a gradient.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input, false)
    }

    /// A differentiable leaf used by tests and gradient checks on raw inputs.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Reads a parameter. Frozen parameters enter the graph as constants.
    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> Var {
        let p = set.param(id);
        let trainable = p.trainable();
        self.push_shared(p.shared(), Op::Param { tag: set.tag(), id }, trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(shape_err("matmul", va, vb));
        }
        let mut out = Matrix::zeros(va.rows(), vb.cols());
        gemm_nn(va, vb, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(shape_err("matmul_t", va, vb));
        }
        let mut out = Matrix::zeros(va.rows(), vb.rows());
        gemm_nt(va, vb, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMulT(a, b), ng))
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        let (va, vb) = (self.value(a), self.value(b));
        let broadcast = vb.rows() == 1 && vb.cols() == va.cols() && va.rows() != 1;
        if va.shape() != vb.shape() && !broadcast {
            return Err(shape_err(name, va, vb));
        }
        let mut out = Matrix::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            let brow = if broadcast { vb.row(0) } else { vb.row(r) };
            for ((o, &x), &y) in out.row_mut(r).iter_mut().zip(va.row(r)).zip(brow) {
                *o = f(x, y);
            }
        }
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("sub", va, vb));
        }
        let out = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Multiplies every entry of `a` by the 1×1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let vs = self.value(s);
        if vs.shape() != (1, 1) {
            return Err(shape_err("scale_by", self.value(a), vs));
        }
        let k = vs.item();
        let out = self.value(a).map(|x| x * k);
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(out, Op::ScaleBy(a, s), ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / x, Op::Recip(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln σ(x)`, finite where `σ(x)` underflows.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// `x ⊙ σ(x)`, composed from primitives.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let s = self.sigmoid(a);
        self.mul(a, s)
    }

    /// Row-wise softmax. With `causal`, row `i` only covers columns `0..=i`
    /// (rows must not outnumber columns).
    pub fn softmax(&mut self, a: Var, causal: bool) -> Result<Var> {
        let va = self.value(a);
        if causal && va.rows() > va.cols() {
            return Err(shape_err("causal softmax", va, va));
        }
        let mut out = Matrix::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            let width = if causal { r + 1 } else { va.cols() };
            softmax_into(&va.row(r)[..width], &mut out.row_mut(r)[..width]);
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::Softmax(a), ng))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = Matrix::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            let row = va.row(r);
            let lse = log_sum_exp(row);
            for (o, &x) in out.row_mut(r).iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// Normalises each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let n = va.cols() as f64;
        let mut out = Matrix::zeros(va.rows(), va.cols());
        let mut inv_std = Vec::with_capacity(va.rows());
        for r in 0..va.rows() {
            let row = va.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            for (o, &x) in out.row_mut(r).iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm { x: a, inv_std }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Matrix::scalar(s), Op::Sum(a), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let mut out = Matrix::zeros(idx.len(), va.cols());
        for (r, &i) in idx.iter().enumerate() {
            if i >= va.rows() {
                return Err(Error::Shape { op: "gather_rows", lhs: va.shape(), rhs: (i, 0) });
            }
            out.row_mut(r).copy_from_slice(va.row(i));
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::GatherRows { x: a, idx: idx.to_vec() }, ng))
    }

    /// Sparse weighted sum: `out = offset + Σ coeff · a[in]` with flat
    /// row-major indices `(out, in, coeff)`. Covers gathers, scatters,
    /// im2col unfolding and cumulative sums.
    pub fn weighted(
        &mut self,
        a: Var,
        rows: usize,
        cols: usize,
        entries: Vec<(usize, usize, f64)>,
        offset: Option<Matrix>,
    ) -> Result<Var> {
        let va = self.value(a);
        let mut out = match offset {
            Some(m) if m.shape() == (rows, cols) => m,
            Some(m) => return Err(Error::Shape { op: "weighted offset", lhs: (rows, cols), rhs: m.shape() }),
            None => Matrix::zeros(rows, cols),
        };
        let n_in = va.len();
        {
            let od = out.data_mut();
            for &(o, i, c) in &entries {
                if o >= od.len() || i >= n_in {
                    return Err(Error::Shape { op: "weighted", lhs: (rows, cols), rhs: va.shape() });
                }
                od[o] += c * va.data()[i];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::Weighted { x: a, entries }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::Shape { op: "concat_rows", lhs: (rows, cols), rhs: v.shape() });
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let out = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::Shape { op: "concat_cols", lhs: (rows, cols), rhs: v.shape() });
            }
            cols += v.cols();
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut c0 = 0;
        for &p in parts {
            let v = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[c0..c0 + v.cols()].copy_from_slice(v.row(r));
            }
            c0 += v.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if start + len > va.rows() {
            return Err(Error::Shape { op: "slice_rows", lhs: va.shape(), rhs: (start, len) });
        }
        let c = va.cols();
        let out = Matrix::from_vec(len, c, va.data()[start * c..(start + len) * c].to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceRows { x: a, start }, ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if start + len > va.cols() {
            return Err(Error::Shape { op: "slice_cols", lhs: va.shape(), rhs: (start, len) });
        }
        let mut out = Matrix::zeros(va.rows(), len);
        for r in 0..va.rows() {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceCols { x: a, start }, ng))
    }

    /// Reverse sweep from a scalar `loss`. Returns one gradient slot per node
    /// (`None` where nothing flowed).
    fn backward(&self, loss: Var) -> Vec<Option<Matrix>> {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let dy = match &node.op {
                Op::Input | Op::Param { .. } => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            let y = &*node.value;
            self.propagate(&node.op, y, &dy, &mut grads);
        }
        grads
    }

    fn propagate(&self, op: &Op, y: &Matrix, dy: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |v: Var| &*self.nodes[v.0].value;
        let mut acc = |v: Var, f: &dyn Fn(&mut Matrix)| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = &mut grads[v.0];
            if slot.is_none() {
                let (r, c) = self.nodes[v.0].value.shape();
                *slot = Some(Matrix::zeros(r, c));
            }
            f(slot.as_mut().unwrap());
        };
        match op {
            Op::Input | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                acc(*a, &|g| gemm_nt(dy, val(*b), g));
                acc(*b, &|g| gemm_tn(val(*a), dy, g));
            }
            Op::MatMulT(a, b) => {
                acc(*a, &|g| gemm_nn(dy, val(*b), g));
                acc(*b, &|g| gemm_tn(dy, val(*a), g));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &|g| g.add_assign(dy));
                acc(*b, &|g| {
                    if g.shape() == dy.shape() {
                        for (x, d) in g.data_mut().iter_mut().zip(dy.data()) {
                            *x += sign * d;
                        }
                    } else {
                        for r in 0..dy.rows() {
                            for (x, d) in g.row_mut(0).iter_mut().zip(dy.row(r)) {
                                *x += sign * d;
                            }
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let bc = vb.shape() != va.shape();
                acc(*a, &|g| {
                    for r in 0..dy.rows() {
                        let brow = if bc { vb.row(0) } else { vb.row(r) };
                        for ((x, d), w) in g.row_mut(r).iter_mut().zip(dy.row(r)).zip(brow) {
                            *x += d * w;
                        }
                    }
                });
                acc(*b, &|g| {
                    for r in 0..dy.rows() {
                        let gr = if bc { 0 } else { r };
                        for ((x, d), w) in g.row_mut(gr).iter_mut().zip(dy.row(r)).zip(va.row(r)) {
                            *x += d * w;
                        }
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &|g| {
                for (x, d) in g.data_mut().iter_mut().zip(dy.data()) {
                    *x += s * d;
                }
            }),
            Op::ScaleBy(a, s) => {
                let k = val(*s).item();
                acc(*a, &|g| {
                    for (x, d) in g.data_mut().iter_mut().zip(dy.data()) {
                        *x += k * d;
                    }
                });
                let ds = dot(dy.data(), val(*a).data());
                acc(*s, &|g| g.data_mut()[0] += ds);
            }
            Op::Recip(a) => elementwise(&mut acc, *a, dy, y, |d, y, _| -d * y * y, val(*a)),
            Op::Sigmoid(a) => elementwise(&mut acc, *a, dy, y, |d, y, _| d * y * (1.0 - y), val(*a)),
            Op::LogSigmoid(a) => elementwise(&mut acc, *a, dy, y, |d, _, x| d * sigmoid(-x), val(*a)),
            Op::Tanh(a) => elementwise(&mut acc, *a, dy, y, |d, y, _| d * (1.0 - y * y), val(*a)),
            Op::Exp(a) => elementwise(&mut acc, *a, dy, y, |d, y, _| d * y, val(*a)),
            Op::Log(a) => elementwise(&mut acc, *a, dy, y, |d, _, x| d / x, val(*a)),
            Op::Abs(a) => elementwise(
                &mut acc,
                *a,
                dy,
                y,
                |d, _, x| if x > 0.0 { d } else if x < 0.0 { -d } else { 0.0 },
                val(*a),
            ),
            Op::Softmax(x) => acc(*x, &|g| {
                for r in 0..dy.rows() {
                    let (yr, dr) = (y.row(r), dy.row(r));
                    let s = dot(yr, dr);
                    for ((o, &yv), &dv) in g.row_mut(r).iter_mut().zip(yr).zip(dr) {
                        *o += yv * (dv - s);
                    }
                }
            }),
            Op::LogSoftmax(x) => acc(*x, &|g| {
                for r in 0..dy.rows() {
                    let (yr, dr) = (y.row(r), dy.row(r));
                    let s: f64 = dr.iter().sum();
                    for ((o, &yv), &dv) in g.row_mut(r).iter_mut().zip(yr).zip(dr) {
                        *o += dv - yv.exp() * s;
                    }
                }
            }),
            Op::LayerNorm { x, inv_std } => acc(*x, &|g| {
                let n = y.cols() as f64;
                for r in 0..dy.rows() {
                    let (yr, dr) = (y.row(r), dy.row(r));
                    let mean_d = dr.iter().sum::<f64>() / n;
                    let mean_dy = dot(dr, yr) / n;
                    let is = inv_std[r];
                    for ((o, &yv), &dv) in g.row_mut(r).iter_mut().zip(yr).zip(dr) {
                        *o += is * (dv - mean_d - yv * mean_dy);
                    }
                }
            }),
            Op::Sum(a) => {
                let d = dy.item();
                acc(*a, &|g| {
                    for x in g.data_mut() {
                        *x += d;
                    }
                });
            }
            Op::GatherRows { x, idx } => acc(*x, &|g| {
                for (r, &i) in idx.iter().enumerate() {
                    for (o, d) in g.row_mut(i).iter_mut().zip(dy.row(r)) {
                        *o += d;
                    }
                }
            }),
            Op::Weighted { x, entries } => acc(*x, &|g| {
                let gd = g.data_mut();
                for &(o, i, c) in entries {
                    gd[i] += c * dy.data()[o];
                }
            }),
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let n = val(p).rows();
                    let c = dy.cols();
                    acc(p, &|g| {
                        for (o, d) in g.data_mut().iter_mut().zip(&dy.data()[r0 * c..(r0 + n) * c]) {
                            *o += d;
                        }
                    });
                    r0 += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let n = val(p).cols();
                    acc(p, &|g| {
                        for r in 0..dy.rows() {
                            for (o, d) in g.row_mut(r).iter_mut().zip(&dy.row(r)[c0..c0 + n]) {
                                *o += d;
                            }
                        }
                    });
                    c0 += n;
                }
            }
            Op::SliceRows { x, start } => acc(*x, &|g| {
                let c = dy.cols();
                for (o, d) in g.data_mut()[start * c..].iter_mut().zip(dy.data()) {
                    *o += d;
                }
            }),
            Op::SliceCols { x, start } => acc(*x, &|g| {
                for r in 0..dy.rows() {
                    for (o, d) in g.row_mut(r)[*start..].iter_mut().zip(dy.row(r)) {
                        *o += d;
                    }
                }
            }),
        }
    }
}

fn elementwise(
    acc: &mut impl FnMut(Var, &dyn Fn(&mut Matrix)),
    a: Var,
    dy: &Matrix,
    y: &Matrix,
    f: impl Fn(f64, f64, f64) -> f64,
    x: &Matrix,
) {
    acc(a, &|g| {
        for (((o, &d), &yv), &xv) in g.data_mut().iter_mut().zip(dy.data()).zip(y.data()).zip(x.data()) {
            *o += f(d, yv, xv);
        }
    });
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_into(xs: &[f64], out: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = (x - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// Gradients for the trainable parameters of one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn zeros_like(set: &ParamSet) -> Self {
        Self {
            grads: set
                .iter()
                .map(|(_, p)| p.trainable().then(|| Matrix::zeros(p.value().rows(), p.value().cols())))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.index()).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn global_norm(&self) -> f64 {
        self.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    /// Adds `other` into `self`; slots present only in `other` are copied.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.add_assign(t),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }
}

/// Reverse-mode gradient of the scalar `loss` with respect to every trainable
/// parameter of `params` that the graph read. Frozen parameters and
/// parameters of other sets get no entry.
pub fn backprop(graph: &Graph, loss: Var, params: &ParamSet) -> Result<Gradients> {
    let lv = graph.value(loss);
    if lv.shape() != (1, 1) {
        return Err(Error::Shape { op: "backprop (loss must be 1×1)", lhs: lv.shape(), rhs: (1, 1) });
    }
    if !lv.item().is_finite() {
        return Err(Error::NonFinite { value: lv.item(), context: "at backprop".into() });
    }
    let node_grads = graph.backward(loss);
    let mut out: Vec<Option<Matrix>> = vec![None; params.len()];
    for (node, g) in graph.nodes.iter().zip(node_grads) {
        if let (Op::Param { tag, id }, Some(g)) = (&node.op, g) {
            if *tag == params.tag() && params.is_trainable(*id) {
                match &mut out[id.index()] {
                    Some(m) => m.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
    }
    Ok(Gradients { grads: out })
}

/// Gradient of `loss` with respect to a raw leaf created by [`Graph::leaf`].
pub fn leaf_gradient(graph: &Graph, loss: Var, leaf: Var) -> Result<Matrix> {
    let lv = graph.value(loss);
    if lv.shape() != (1, 1) {
        return Err(Error::Shape { op: "leaf_gradient", lhs: lv.shape(), rhs: (1, 1) });
    }
    let mut g = graph.backward(loss);
    let (r, c) = graph.value(leaf).shape();
    Ok(g[leaf.0].take().unwrap_or_else(|| Matrix::zeros(r, c)))
}
