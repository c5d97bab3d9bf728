//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough
//! bookkeeping to produce the vector-Jacobian product later. Nodes are
//! addressed by [`Var`] handles. `backward` consumes the tape, so a tape
//! never outlives the pass it was recorded for.

use std::collections::HashMap;

use super::tensor::{
    broadcast_shape, broadcast_strides, contiguous_strides, for_each_broadcast, for_each_strided,
    gemm, Tensor,
};
use crate::error::{DartsError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinKind, Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    SumAxis { x: Var, axis: usize },
    Softmax(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, transpose_b: bool },
    StraightThrough(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.leaves.remove(&v.0)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(DartsError::NonFinite {
            term: what.to_string(),
            detail: "operation produced NaN or infinity".into(),
        })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, op, rg)
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    // ------------------------------------------------------------------
    // elementwise binary ops with broadcasting

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let f = match kind {
            BinKind::Add => |x: f64, y: f64| x + y,
            BinKind::Sub => |x: f64, y: f64| x - y,
            BinKind::Mul => |x: f64, y: f64| x * y,
            BinKind::Div => |x: f64, y: f64| x / y,
        };
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(ta.shape().to_vec(), data)
        } else {
            let out_shape = broadcast_shape(ta.shape(), tb.shape())?;
            let sa = broadcast_strides(ta.shape(), &out_shape);
            let sb = broadcast_strides(tb.shape(), &out_shape);
            let mut data = vec![0.0; out_shape.iter().product()];
            let (da, db) = (ta.data(), tb.data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| data[o] = f(da[i], db[j]));
            Tensor::from_parts(out_shape, data)
        };
        if matches!(kind, BinKind::Div) {
            check_finite(&value, "div")?;
        }
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    // ------------------------------------------------------------------
    // elementwise unary ops

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push_unary(x, value, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push_unary(x, value, Op::MulScalar(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.mul_scalar(x, -1.0)
    }

    /// `c - x`
    pub fn rsub_scalar(&mut self, c: f64, x: Var) -> Var {
        let n = self.neg(x);
        self.add_scalar(n, c)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push_unary(x, value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push_unary(x, value, Op::Tanh(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| if v >= 0.0 { v } else { slope * v });
        self.push_unary(x, value, Op::LeakyRelu(x, slope))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::exp);
        check_finite(&value, "exp")?;
        Ok(self.push_unary(x, value, Op::Exp(x)))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if let Some(bad) = t.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(DartsError::Domain(format!("log of non-positive value {bad}")));
        }
        let value = t.map(f64::ln);
        Ok(self.push_unary(x, value, Op::Log(x)))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if let Some(bad) = t.data().iter().find(|&&v| v < 0.0 || v.is_nan()) {
            return Err(DartsError::Domain(format!("sqrt of negative value {bad}")));
        }
        let value = t.map(f64::sqrt);
        Ok(self.push_unary(x, value, Op::Sqrt(x)))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.push_unary(x, value, Op::Square(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push_unary(x, value, Op::Clamp(x, lo, hi))
    }

    // ------------------------------------------------------------------
    // reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push_unary(x, value, Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Sums over `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(DartsError::shape(format!(
                "axis {axis} out of range for shape {:?}",
                t.shape()
            )));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, s) in dst.iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let value = Tensor::from_parts(shape, out);
        Ok(self.push_unary(x, value, Op::SumAxis { x, axis }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .value(x)
            .shape()
            .get(axis)
            .ok_or_else(|| DartsError::shape(format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.mul_scalar(s, 1.0 / n as f64))
    }

    /// Softmax over the last axis.
    ///
    /// `mask`, when given, covers the trailing axes of `x` and is repeated
    /// across the leading ones; `false` entries receive probability 0.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        let cols = *t
            .shape()
            .last()
            .ok_or_else(|| DartsError::shape("softmax of a scalar"))?;
        if let Some(m) = mask {
            if m.is_empty() || m.len() % cols != 0 || t.numel() % m.len() != 0 {
                return Err(DartsError::shape(format!(
                    "mask of {} entries does not tile shape {:?}",
                    m.len(),
                    t.shape()
                )));
            }
        }
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for (r, (row, dst)) in src.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let keep = |j: usize| mask.map_or(true, |m| m[(r * cols + j) % m.len()]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(DartsError::DegenerateRow(format!(
                    "row {r} has no unmasked entries"
                )));
            }
            let mut total = 0.0;
            for (j, (&v, d)) in row.iter().zip(dst.iter_mut()).enumerate() {
                if keep(j) {
                    *d = (v - max).exp();
                    total += *d;
                }
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push_unary(x, value, Op::Softmax(x)))
    }

    // ------------------------------------------------------------------
    // layout ops

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push_unary(x, value, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(perm)?;
        Ok(self.push_unary(x, value, Op::Permute(x, perm.to_vec())))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || len == 0 || start + len > t.shape()[axis] {
            return Err(DartsError::shape(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                t.shape()
            )));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::from_parts(shape, out);
        Ok(self.push_unary(x, value, Op::Narrow { x, axis, start }))
    }

    /// Index along `axis`, dropping it.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let n = self.narrow(x, axis, index, 1)?;
        let mut shape = self.shape(n).to_vec();
        shape.remove(axis);
        self.reshape(n, &shape)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| DartsError::shape("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(DartsError::shape(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(DartsError::shape(format!(
                    "cannot concat {s:?} with {base:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = xs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Stacks equally shaped tensors along a new axis.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let mut expanded = Vec::with_capacity(xs.len());
        for &v in xs {
            let mut shape = self.shape(v).to_vec();
            if axis > shape.len() {
                return Err(DartsError::shape(format!("stack axis {axis} out of range")));
            }
            shape.insert(axis, 1);
            expanded.push(self.reshape(v, &shape)?);
        }
        self.concat(&expanded, axis)
    }

    // ------------------------------------------------------------------
    // products

    /// `[..., k] x [k, n] -> [..., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let k = *ta.shape().last().unwrap_or(&1);
        if ta.rank() < 1 || tb.rank() != 2 || tb.shape()[0] != k {
            return Err(DartsError::shape(format!(
                "matmul {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let n = tb.shape()[1];
        let m = ta.numel() / k;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), (k as isize, 1), tb.data(), (n as isize, 1), &mut out, 0.0);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), rg))
    }

    /// Batched product `[B, m, k] x [B, k, n]`, or `[B, m, k] x [B, n, k]ᵀ`
    /// when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(DartsError::shape(format!(
                "bmm {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (kb, n) = if transpose_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        if kb != k {
            return Err(DartsError::shape(format!(
                "bmm inner extents {k} and {kb} differ"
            )));
        }
        let b_strides = if transpose_b {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ta.data()[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
                &tb.data()[i * k * n..(i + 1) * k * n],
                b_strides,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::Bmm { a, b, transpose_b },
            rg,
        ))
    }

    /// Forward value `hard`, gradient routed unchanged to `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(DartsError::shape("straight-through value shape differs"));
        }
        Ok(self.push_unary(soft, hard, Op::StraightThrough(soft)))
    }

    // ------------------------------------------------------------------
    // backward

    /// Accumulates gradients of the scalar `loss` into every trainable leaf.
    /// Leaves the loss does not depend on receive zeros.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(DartsError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            propagate(&nodes, idx, &g, &mut grads);
        }

        let mut leaves = HashMap::new();
        for (idx, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let data = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                leaves.insert(idx, Tensor::from_parts(node.value.shape().to_vec(), data));
            }
        }
        Ok(Gradients { leaves })
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn accumulate_unary(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    x: Var,
    g: &[f64],
    local: impl Fn(usize, f64) -> f64,
) {
    if let Some(gx) = grad_slot(grads, nodes, x) {
        for (i, (d, &gi)) in gx.iter_mut().zip(g).enumerate() {
            *d += local(i, gi);
        }
    }
}

fn propagate(nodes: &[Node], idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[idx];
    let out = node.value.data();
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (da, db) = (ta.data(), tb.data());
            let out_shape = node.value.shape();
            let same = ta.shape() == tb.shape();
            let sa = broadcast_strides(ta.shape(), out_shape);
            let sb = broadcast_strides(tb.shape(), out_shape);
            let visit = |f: &mut dyn FnMut(usize, usize, usize)| {
                if same {
                    for i in 0..g.len() {
                        f(i, i, i);
                    }
                } else {
                    for_each_broadcast(out_shape, &sa, &sb, f);
                }
            };
            if let Some(ga) = grad_slot(grads, nodes, *a) {
                match kind {
                    BinKind::Add | BinKind::Sub => visit(&mut |o, i, _| ga[i] += g[o]),
                    BinKind::Mul => visit(&mut |o, i, j| ga[i] += g[o] * db[j]),
                    BinKind::Div => visit(&mut |o, i, j| ga[i] += g[o] / db[j]),
                }
            }
            if let Some(gb) = grad_slot(grads, nodes, *b) {
                match kind {
                    BinKind::Add => visit(&mut |o, _, j| gb[j] += g[o]),
                    BinKind::Sub => visit(&mut |o, _, j| gb[j] -= g[o]),
                    BinKind::Mul => visit(&mut |o, i, j| gb[j] += g[o] * da[i]),
                    BinKind::Div => visit(&mut |o, i, j| gb[j] -= g[o] * da[i] / (db[j] * db[j])),
                }
            }
        }
        Op::AddScalar(x) | Op::Reshape(x) | Op::StraightThrough(x) => {
            accumulate_unary(grads, nodes, *x, g, |_, gi| gi)
        }
        Op::MulScalar(x, c) => accumulate_unary(grads, nodes, *x, g, |_, gi| gi * c),
        Op::Sigmoid(x) => accumulate_unary(grads, nodes, *x, g, |i, gi| gi * out[i] * (1.0 - out[i])),
        Op::Tanh(x) => accumulate_unary(grads, nodes, *x, g, |i, gi| gi * (1.0 - out[i] * out[i])),
        Op::LeakyRelu(x, slope) => {
            let xv = val(*x);
            accumulate_unary(grads, nodes, *x, g, |i, gi| if xv[i] >= 0.0 { gi } else { gi * slope })
        }
        Op::Exp(x) => accumulate_unary(grads, nodes, *x, g, |i, gi| gi * out[i]),
        Op::Log(x) => {
            let xv = val(*x);
            accumulate_unary(grads, nodes, *x, g, |i, gi| gi / xv[i])
        }
        Op::Sqrt(x) => accumulate_unary(grads, nodes, *x, g, |i, gi| {
            if out[i] > 0.0 {
                gi * 0.5 / out[i]
            } else {
                0.0
            }
        }),
        Op::Square(x) => {
            let xv = val(*x);
            accumulate_unary(grads, nodes, *x, g, |i, gi| 2.0 * gi * xv[i])
        }
        Op::Clamp(x, lo, hi) => {
            let xv = val(*x);
            accumulate_unary(grads, nodes, *x, g, |i, gi| {
                if xv[i] < *lo || xv[i] > *hi {
                    0.0
                } else {
                    gi
                }
            })
        }
        Op::SumAll(x) => {
            if let Some(gx) = grad_slot(grads, nodes, *x) {
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::SumAxis { x, axis } => {
            let shape = nodes[x.0].value.shape();
            let (outer, n, inner) = split_axis(shape, *axis);
            if let Some(gx) = grad_slot(grads, nodes, *x) {
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for j in 0..n {
                        let dst = &mut gx[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let cols = *node.value.shape().last().unwrap();
            if let Some(gx) = grad_slot(grads, nodes, *x) {
                for ((y, gy), dst) in out.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for ((d, &yi), &gi) in dst.iter_mut().zip(y).zip(gy) {
                        *d += yi * (gi - dot);
                    }
                }
            }
        }
        Op::Permute(x, perm) => {
            if let Some(gx) = grad_slot(grads, nodes, *x) {
                // out[idx] = x[perm-mapped idx]; scatter back with the same strides
                let src_strides = contiguous_strides(nodes[x.0].value.shape());
                let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
                let mut o = 0;
                for_each_strided(node.value.shape(), &strides, |src| {
                    gx[src] += g[o];
                    o += 1;
                });
            }
        }
        Op::Narrow { x, axis, start } => {
            let shape = nodes[x.0].value.shape();
            let (outer, n, inner) = split_axis(shape, *axis);
            let len = node.value.shape()[*axis];
            if let Some(gx) = grad_slot(grads, nodes, *x) {
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (d, s) in gx[base..base + len * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
        Op::Concat { xs, axis } => {
            let out_shape = node.value.shape();
            let (outer, total, inner) = split_axis(out_shape, *axis);
            let mut offset = 0;
            for &v in xs {
                let n = nodes[v.0].value.shape()[*axis];
                if let Some(gx) = grad_slot(grads, nodes, v) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                        let dst = &mut gx[o * n * inner..(o + 1) * n * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                offset += n;
            }
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let k = tb.shape()[0];
            let n = tb.shape()[1];
            let m = ta.numel() / k;
            let (da, db) = (ta.data(), tb.data());
            if let Some(ga) = grad_slot(grads, nodes, *a) {
                gemm(m, n, k, g, (n as isize, 1), db, (1, n as isize), ga, 1.0);
            }
            if let Some(gb) = grad_slot(grads, nodes, *b) {
                gemm(k, m, n, da, (1, k as isize), g, (n as isize, 1), gb, 1.0);
            }
        }
        Op::Bmm { a, b, transpose_b } => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
            let n = node.value.shape()[2];
            let (da, db) = (ta.data(), tb.data());
            if let Some(ga) = grad_slot(grads, nodes, *a) {
                // ga = g · op(b)ᵀ
                let bt_strides = if *transpose_b {
                    (k as isize, 1)
                } else {
                    (1, n as isize)
                };
                for i in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        (n as isize, 1),
                        &db[i * k * n..(i + 1) * k * n],
                        bt_strides,
                        &mut ga[i * m * k..(i + 1) * m * k],
                        1.0,
                    );
                }
            }
            if let Some(gb) = grad_slot(grads, nodes, *b) {
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &da[i * m * k..(i + 1) * m * k];
                    let dst = &mut gb[i * k * n..(i + 1) * k * n];
                    if *transpose_b {
                        // gb = gᵀ · a  ([n, m] x [m, k])
                        gemm(n, m, k, gi, (1, n as isize), ai, (k as isize, 1), dst, 1.0);
                    } else {
                        // gb = aᵀ · g  ([k, m] x [m, n])
                        gemm(k, m, n, ai, (1, k as isize), gi, (n as isize, 1), dst, 1.0);
                    }
                }
            }
        }
    }
}
