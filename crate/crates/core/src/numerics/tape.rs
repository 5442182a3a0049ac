use std::sync::atomic::{AtomicUsize, Ordering};

use super::tensor::{gemm, Strided, Tensor};
use crate::{Error, Result};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x[m×n] + b[n]` broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, f64),
    MeanAxis(Var, usize),
    Sum(Var),
    WeightedSum(Var, Vec<f64>),
    Reshape(Var),
    PairwiseHinge(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Wengert list for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the record is topologically
/// sorted by construction. A tape is single-threaded; independent samples use
/// independent tapes and their gradients are summed by the caller.
#[derive(Debug)]
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one optional gradient per recorded node.
#[derive(Debug)]
pub struct Gradients {
    tape: usize,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` if `v` does not require grad
    /// or is not reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but yields zeros of the right shape for
    /// unreachable variables.
    pub fn get_or_zeros(&self, v: Var, tape: &Tape) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn check(&self, v: Var) -> Result<&Tensor> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(&self.nodes[v.index].value)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index].requires_grad)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.needs(&[x]);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.needs(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.check(a)?.matmul(self.check(b)?)?;
        Ok(self.binary(a, b, out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        let (m, k) = av.dims2("matmul_nt")?;
        let (n, k2) = bv.dims2("matmul_nt")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            Strided::row_major(av.data(), k),
            Strided::transposed(bv.data(), k),
            &mut out,
            false,
        );
        let out = Tensor::matrix(m, n, out)?;
        Ok(self.binary(a, b, out, Op::MatMulNt(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        if av.shape() != bv.shape() {
            return Err(Error::Shape {
                op,
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        Ok(self.binary(a, b, out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        Ok(self.binary(a, b, out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        Ok(self.binary(a, b, out, Op::Mul(a, b)))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.check(x)?, self.check(bias)?);
        let (_, n) = xv.dims2("add_row")?;
        if bv.shape() != [n] {
            return Err(Error::Shape {
                op: "add_row",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let b = bv.data();
        let data = xv
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.binary(x, bias, out, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.check(x)?.map(|v| v * c);
        Ok(self.unary(x, out, Op::Scale(x, c)))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.check(x)?.map(|v| v + c);
        Ok(self.unary(x, out, Op::AddScalar(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.check(x)?.map(sigmoid);
        Ok(self.unary(x, out, Op::Sigmoid(x)))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.check(x)?.map(gelu);
        Ok(self.unary(x, out, Op::Gelu(x)))
    }

    /// Softmax over the last axis (each row of a matrix, or a whole vector).
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.check(x)?;
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(last_dim(xv)) {
            softmax_in_place(row);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.unary(x, out, Op::Softmax(x)))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.check(x)?;
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(last_dim(xv)) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.unary(x, out, Op::LogSoftmax(x)))
    }

    /// Normalises each row to zero mean and unit variance (no affine terms).
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.check(x)?;
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(last_dim(xv)) {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.unary(x, out, Op::LayerNorm(x, eps)))
    }

    /// Arithmetic mean along `axis`; the axis is dropped from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = mean_over_axis(self.check(x)?, axis)?;
        Ok(self.unary(x, out, Op::MeanAxis(x, axis)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.check(x)?.sum());
        Ok(self.unary(x, out, Op::Sum(x)))
    }

    /// `Σ w_i x_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let xv = self.check(x)?;
        if xv.len() != weights.len() {
            return Err(Error::Shape {
                op: "weighted_sum",
                left: xv.shape().to_vec(),
                right: vec![weights.len()],
            });
        }
        let s = xv.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        Ok(self.unary(x, Tensor::scalar(s), Op::WeightedSum(x, weights)))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.check(x)?.reshape(shape)?;
        Ok(self.unary(x, out, Op::Reshape(x)))
    }

    /// `Σ_{i≠j} 1(t_i > t_j) · max(0, x_j − x_i)` for a prediction vector `x`
    /// and constant targets `t`.
    pub fn pairwise_hinge(&mut self, pred: Var, target: Vec<f64>) -> Result<Var> {
        let pv = self.check(pred)?;
        if pv.len() != target.len() {
            return Err(Error::Shape {
                op: "pairwise_hinge",
                left: pv.shape().to_vec(),
                right: vec![target.len()],
            });
        }
        let loss = pairwise_hinge(&target, pv.data());
        Ok(self.unary(pred, Tensor::scalar(loss), Op::PairwiseHinge(pred, target)))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients of variables used more than once are summed over uses.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.check(loss)?;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.index].requires_grad {
            grads[loss.index] = Some(Tensor::full(lv.shape(), 1.0));
        }
        for index in (0..=loss.index).rev() {
            let node = &self.nodes[index];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[index].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[index] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.index].requires_grad {
            return;
        }
        match &mut grads[v.index] {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(delta.data())
                .for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.index].value;
        let like = |v: Var, data: Vec<f64>| {
            Tensor::new(val(v).shape().to_vec(), data).expect("gradient shape")
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (val(a).rows(), val(a).cols());
                let n = val(b).cols();
                if self.nodes[a.index].requires_grad {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        Strided::row_major(g.data(), n),
                        Strided::transposed(val(b).data(), n),
                        &mut da,
                        false,
                    );
                    self.accumulate(grads, a, like(a, da));
                }
                if self.nodes[b.index].requires_grad {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        Strided::transposed(val(a).data(), k),
                        Strided::row_major(g.data(), n),
                        &mut db,
                        false,
                    );
                    self.accumulate(grads, b, like(b, db));
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = (val(a).rows(), val(a).cols());
                let n = val(b).rows();
                if self.nodes[a.index].requires_grad {
                    // dA = dC · B
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        Strided::row_major(g.data(), n),
                        Strided::row_major(val(b).data(), k),
                        &mut da,
                        false,
                    );
                    self.accumulate(grads, a, like(a, da));
                }
                if self.nodes[b.index].requires_grad {
                    // dB = dCᵀ · A
                    let mut db = vec![0.0; n * k];
                    gemm(
                        n,
                        m,
                        k,
                        Strided::transposed(g.data(), n),
                        Strided::row_major(val(a).data(), k),
                        &mut db,
                        false,
                    );
                    self.accumulate(grads, b, like(b, db));
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                let ga = g
                    .data()
                    .iter()
                    .zip(val(b).data())
                    .map(|(g, y)| g * y)
                    .collect();
                let gb = g
                    .data()
                    .iter()
                    .zip(val(a).data())
                    .map(|(g, x)| g * x)
                    .collect();
                self.accumulate(grads, a, like(a, ga));
                self.accumulate(grads, b, like(b, gb));
            }
            &Op::AddRow(x, bias) => {
                self.accumulate(grads, x, g.clone());
                let n = val(bias).len();
                let mut gb = vec![0.0; n];
                for row in g.data().chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                self.accumulate(grads, bias, like(bias, gb));
            }
            &Op::Scale(x, c) => self.accumulate(grads, x, g.map(|v| v * c)),
            &Op::AddScalar(x) | &Op::Reshape(x) => {
                self.accumulate(grads, x, like(x, g.data().to_vec()))
            }
            &Op::Sigmoid(x) => {
                let gx = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, x, like(x, gx));
            }
            &Op::Gelu(x) => {
                let gx = g
                    .data()
                    .iter()
                    .zip(val(x).data())
                    .map(|(g, &v)| g * gelu_derivative(v))
                    .collect();
                self.accumulate(grads, x, like(x, gx));
            }
            &Op::Softmax(x) => {
                let n = last_dim(y);
                let mut gx = Vec::with_capacity(y.len());
                for (gr, yr) in g.data().chunks(n).zip(y.data().chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    gx.extend(gr.iter().zip(yr).map(|(g, s)| s * (g - dot)));
                }
                self.accumulate(grads, x, like(x, gx));
            }
            &Op::LogSoftmax(x) => {
                let n = last_dim(y);
                let mut gx = Vec::with_capacity(y.len());
                for (gr, yr) in g.data().chunks(n).zip(y.data().chunks(n)) {
                    let total: f64 = gr.iter().sum();
                    gx.extend(gr.iter().zip(yr).map(|(g, ls)| g - ls.exp() * total));
                }
                self.accumulate(grads, x, like(x, gx));
            }
            &Op::LayerNorm(x, eps) => {
                let n = last_dim(y);
                let mut gx = Vec::with_capacity(y.len());
                let rows = g
                    .data()
                    .chunks(n)
                    .zip(y.data().chunks(n))
                    .zip(val(x).data().chunks(n));
                for ((gr, yr), xr) in rows {
                    let nf = n as f64;
                    let mean = xr.iter().sum::<f64>() / nf;
                    let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let g_mean = gr.iter().sum::<f64>() / nf;
                    let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / nf;
                    gx.extend(
                        gr.iter()
                            .zip(yr)
                            .map(|(g, yv)| inv * (g - g_mean - yv * gy_mean)),
                    );
                }
                self.accumulate(grads, x, like(x, gx));
            }
            &Op::MeanAxis(x, axis) => {
                let shape = val(x).shape();
                let (outer, len, inner) = axis_split(shape, axis);
                let mut gx = vec![0.0; val(x).len()];
                for o in 0..outer {
                    for a in 0..len {
                        for i in 0..inner {
                            gx[(o * len + a) * inner + i] = g.data()[o * inner + i] / len as f64;
                        }
                    }
                }
                self.accumulate(grads, x, like(x, gx));
            }
            &Op::Sum(x) => {
                let g0 = g.data()[0];
                self.accumulate(grads, x, val(x).map(|_| g0));
            }
            Op::WeightedSum(x, w) => {
                let g0 = g.data()[0];
                self.accumulate(grads, *x, like(*x, w.iter().map(|w| w * g0).collect()));
            }
            Op::PairwiseHinge(pred, target) => {
                let g0 = g.data()[0];
                let p = val(*pred).data();
                let mut gp = vec![0.0; p.len()];
                for i in 0..p.len() {
                    for j in 0..p.len() {
                        if target[i] > target[j] && p[j] - p[i] > 0.0 {
                            gp[j] += g0;
                            gp[i] -= g0;
                        }
                    }
                }
                self.accumulate(grads, *pred, like(*pred, gp));
            }
        }
    }
}

fn last_dim(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1)
}

/// `(outer, axis length, inner)` strides for reducing along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn mean_over_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::InvalidArgument(format!(
            "axis {axis} out of range for rank {}",
            shape.len()
        )));
    }
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for a in 0..len {
            let src = &x.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
            out[o * inner..(o + 1) * inner]
                .iter_mut()
                .zip(src)
                .for_each(|(acc, v)| *acc += v);
        }
    }
    out.iter_mut().for_each(|v| *v /= len as f64);
    let mut out_shape = shape.to_vec();
    out_shape.remove(axis);
    if out_shape.is_empty() {
        return Ok(Tensor::scalar(out[0]));
    }
    Tensor::new(out_shape, out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Max-shifted softmax of a slice, in place.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    xs.iter_mut().for_each(|v| *v /= total);
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut out = xs.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn pairwise_hinge(target: &[f64], pred: &[f64]) -> f64 {
    let mut loss = 0.0;
    for i in 0..pred.len() {
        for j in 0..pred.len() {
            if target[i] > target[j] {
                loss += (pred[j] - pred[i]).max(0.0);
            }
        }
    }
    loss
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_uniform_and_shifted() {
        let mut t = Tape::new();
        let x = t.constant(m(&[vec![0.0, 0.0, 0.0], vec![1000.0, 1000.0, 1000.0]]));
        let y = t.softmax_rows(x).unwrap();
        for v in t.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = t.constant(m(&[vec![1000.0, 1000.0]]));
        let y = t.softmax_rows(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_two_logits() {
        let mut t = Tape::new();
        let x = t.constant(m(&[vec![1.0, 2.0]]));
        let y = t.softmax_rows(x).unwrap();
        let e1 = 1f64.exp();
        let e2 = 2f64.exp();
        let expected = [e1 / (e1 + e2), e2 / (e1 + e2)];
        assert!((expected[0] - 0.268_941_421_369_995).abs() < 1e-12);
        for (a, b) in t.value(y).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_symmetry_and_gradient_at_zero() {
        assert_eq!(sigmoid(0.0), 0.5);
        for x in [0.3, 2.0, 17.0, 800.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(0.0));
        let y = t.sigmoid(x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn mean_axis_examples() {
        let x = m(&[vec![1.0, 3.0], vec![5.0, 7.0]]);
        assert_eq!(mean_over_axis(&x, 0).unwrap().data(), &[3.0, 5.0]);
        assert_eq!(mean_over_axis(&x, 1).unwrap().data(), &[2.0, 6.0]);
        let row = m(&[vec![4.0, -1.0, 2.5]]);
        assert_eq!(mean_over_axis(&row, 0).unwrap().data(), row.data());
        assert!(mean_over_axis(&x, 2).is_err());
    }

    #[test]
    fn sum_gives_ones_and_square_gives_2x() {
        let mut t = Tape::new();
        let x0 = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.5]).unwrap();
        let x = t.param(x0.clone());
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));

        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        let g = t.backward(s).unwrap();
        let two_x: Vec<f64> = x0.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(x).unwrap().data(), &two_x[..]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
        let mut other = Tape::new();
        let y = other.param(Tensor::scalar(1.0));
        assert!(matches!(t.backward(y), Err(Error::ForeignVar)));
        assert!(matches!(t.add(x, y), Err(Error::ForeignVar)));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::scalar(2.0));
        let b = t.param(Tensor::scalar(3.0));
        let c = t.mul(a, b).unwrap();
        let g = t.backward(c).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn hinge_subgradient_is_zero_at_tie() {
        let mut t = Tape::new();
        let p = t.param(Tensor::vector(vec![0.5, 0.5]).unwrap());
        let l = t.pairwise_hinge(p, vec![1.0, 0.0]).unwrap();
        assert_eq!(t.value(l).data(), &[0.0]);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[0.0, 0.0]);
    }
}
