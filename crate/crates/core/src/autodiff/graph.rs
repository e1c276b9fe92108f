use crate::error::{Error, Result};
use crate::mmd::KernelSpec;
use crate::tensor::{gemm, Tensor};

use super::params::ParamId;

/// Inputs to `log` are clamped from below at this value; the clamped region
/// has zero gradient.
pub const LOG_CLAMP: f64 = 1e-300;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// How the right operand of a binary elementwise op is broadcast.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// Right operand has `n` elements, `n` = last extent of the left operand.
    Row,
    Scalar,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize, usize),
    SelectCols(Var, Vec<usize>),
    Reshape(Var),
    Mmd(Var, Var, KernelSpec),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
    /// False for data inputs and everything computed from them alone.
    needs_grad: bool,
}

/// A reverse-mode tape. Nodes are appended in evaluation order, which is a
/// topological order, so the backward sweep walks indices in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed like the graph's nodes.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros when `v` did not
    /// influence the root.
    pub fn get(&self, g: &Graph, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
    }

    pub(crate) fn param_grad(&self, index: usize) -> Option<&Tensor> {
        self.grads[index].as_ref()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn axis_geometry(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::MatMul(a, b)
            | Op::Add(a, b, _)
            | Op::Sub(a, b, _)
            | Op::Mul(a, b, _)
            | Op::Mmd(a, b, _) => self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad,
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softplus(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumAxis(a, _)
            | Op::MeanAxis(a, _)
            | Op::Slice(a, ..)
            | Op::SelectCols(a, _)
            | Op::Reshape(a) => self.nodes[a.0].needs_grad,
            Op::Concat(parts, _) => parts.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            param: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A data input. Unlike [`Graph::constant`], no adjoint is accumulated
    /// for it or for nodes that depend on inputs only.
    pub fn input(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].needs_grad = false;
        v
    }

    /// A constant input; gradients are still computed for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub(crate) fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub(crate) fn param_nodes(&self) -> impl Iterator<Item = (usize, ParamId)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (i, p)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(Bcast::Same)
        } else if tb.len() == 1 {
            Ok(Bcast::Scalar)
        } else if ta.rank() >= 1
            && tb.len() == *ta.shape().last().unwrap()
            && tb.shape().iter().rev().skip(1).all(|&e| e == 1)
        {
            Ok(Bcast::Row)
        } else {
            Err(shape_err(op, ta, tb))
        }
    }

    fn binary(&self, a: Var, b: Var, mode: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = tb.len();
        let data: Vec<f64> = match mode {
            Bcast::Same => ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
            Bcast::Scalar => {
                let y = tb.data()[0];
                ta.data().iter().map(|&x| f(x, y)).collect()
            }
            Bcast::Row => ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, tb.data()[i % n]))
                .collect(),
        };
        Tensor::new(ta.shape().to_vec(), data).expect("same shape as lhs")
    }

    /// Elementwise `a + b`; `b` may be a row vector or a scalar broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mode = self.bcast("add", a, b)?;
        let out = self.binary(a, b, mode, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b, mode)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let mode = self.bcast("sub", a, b)?;
        let out = self.binary(a, b, mode, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b, mode)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let mode = self.bcast("mul", a, b)?;
        let out = self.binary(a, b, mode, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b, mode)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        self.push(out, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(fast_tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(LOG_CLAMP).ln());
        self.push(out, Op::Log(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same shape")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    fn reduce_axis(&self, a: Var, axis: usize, op: &'static str) -> Result<(Tensor, usize)> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::Shape {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![axis],
            });
        }
        let (outer, n, inner) = axis_geometry(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let mut buf = Vec::with_capacity(n);
        for o in 0..outer {
            for i in 0..inner {
                buf.clear();
                buf.extend((0..n).map(|k| t.data()[(o * n + k) * inner + i]));
                out[o * inner + i] = order_invariant_sum(&mut buf);
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Ok((Tensor::new(shape, out)?, n))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (out, _) = self.reduce_axis(a, axis, "sum_axis")?;
        Ok(self.push(out, Op::SumAxis(a, axis)))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (mut out, n) = self.reduce_axis(a, axis, "mean_axis")?;
        if n == 0 {
            return Err(Error::Shape {
                op: "mean_axis",
                lhs: self.value(a).shape().to_vec(),
                rhs: vec![axis],
            });
        }
        out.data_mut().iter_mut().for_each(|v| *v /= n as f64);
        Ok(self.push(out, Op::MeanAxis(a, axis)))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Shape {
                op: "concat",
                lhs: first,
                rhs: vec![axis],
            });
        }
        let mut shape = first.clone();
        shape[axis] = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            shape[axis] += s[axis];
        }
        let (outer, _, inner) = axis_geometry(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis)))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() || start > end || end > t.shape()[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: t.shape().to_vec(),
                rhs: vec![axis, start, end],
            });
        }
        let (outer, n, inner) = axis_geometry(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            data.extend_from_slice(&t.data()[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = end - start;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Slice(a, axis, start, end)))
    }

    /// Gathers columns of a matrix; indices may repeat.
    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || idx.iter().any(|&i| i >= t.shape()[1]) {
            return Err(Error::Shape {
                op: "select_cols",
                lhs: t.shape().to_vec(),
                rhs: idx.to_vec(),
            });
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            data.extend(idx.iter().map(|&j| t.data()[i * c + j]));
        }
        let out = Tensor::new(vec![r, idx.len()], data)?;
        Ok(self.push(out, Op::SelectCols(a, idx.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Biased (V-statistic) squared MMD between the rows of `a` and `b`,
    /// without the non-negativity clamp.
    pub fn mmd_squared(&mut self, a: Var, b: Var, kernel: &KernelSpec) -> Result<Var> {
        let v = crate::mmd::mmd_squared_unclamped(self.value(a), self.value(b), kernel)?;
        Ok(self.push(Tensor::scalar(v), Op::Mmd(a, b, kernel.clone())))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::Shape {
                op: "backward (root must be scalar)",
                lhs: rv.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.nodes[a.0].needs_grad {
                    let ga = acc_slot(grads, *a, ta.shape());
                    gemm(
                        g.data(),
                        m,
                        n,
                        false,
                        tb.data(),
                        k,
                        true,
                        ga.data_mut(),
                        true,
                    );
                }
                if self.nodes[b.0].needs_grad {
                    let gb = acc_slot(grads, *b, tb.shape());
                    gemm(
                        ta.data(),
                        k,
                        m,
                        true,
                        g.data(),
                        n,
                        false,
                        gb.data_mut(),
                        true,
                    );
                }
            }
            Op::Add(a, b, mode) => {
                accumulate(grads, *a, self.value(*a).shape(), g.data().iter().copied());
                self.reduce_into(grads, *b, *mode, g.data().iter().copied());
            }
            Op::Sub(a, b, mode) => {
                accumulate(grads, *a, self.value(*a).shape(), g.data().iter().copied());
                self.reduce_into(grads, *b, *mode, g.data().iter().map(|v| -v));
            }
            Op::Mul(a, b, mode) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = tb.len();
                let bval = |j: usize| match mode {
                    Bcast::Same => tb.data()[j],
                    Bcast::Row => tb.data()[j % n],
                    Bcast::Scalar => tb.data()[0],
                };
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(j, gv)| gv * bval(j))
                    .collect();
                let gb: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(gv, av)| gv * av)
                    .collect();
                accumulate(grads, *a, ta.shape(), ga.into_iter());
                self.reduce_into(grads, *b, *mode, gb.into_iter());
            }
            Op::Neg(a) => accumulate(grads, *a, val.shape(), g.data().iter().map(|v| -v)),
            Op::Scale(a, c) => accumulate(grads, *a, val.shape(), g.data().iter().map(|v| c * v)),
            Op::AddScalar(a) => accumulate(grads, *a, val.shape(), g.data().iter().copied()),
            Op::Tanh(a) => accumulate(
                grads,
                *a,
                val.shape(),
                g.data()
                    .iter()
                    .zip(val.data())
                    .map(|(gv, y)| gv * (1.0 - y * y)),
            ),
            Op::Exp(a) => accumulate(
                grads,
                *a,
                val.shape(),
                g.data().iter().zip(val.data()).map(|(gv, y)| gv * y),
            ),
            Op::Log(a) => {
                let x = self.value(*a);
                accumulate(
                    grads,
                    *a,
                    val.shape(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, &xv)| if xv > LOG_CLAMP { gv / xv } else { 0.0 }),
                );
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                accumulate(
                    grads,
                    *a,
                    val.shape(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, &xv)| gv * sigmoid(xv)),
                );
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                let gv = g.item();
                accumulate(grads, *a, ta.shape(), std::iter::repeat_n(gv, ta.len()));
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                let gv = g.item() / ta.len().max(1) as f64;
                accumulate(grads, *a, ta.shape(), std::iter::repeat_n(gv, ta.len()));
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let ta = self.value(*a);
                let (outer, n, inner) = axis_geometry(ta.shape(), *axis);
                let c = if matches!(node.op, Op::MeanAxis(..)) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                let it = (0..ta.len()).map(|j| {
                    let o = j / (n * inner);
                    let i = j % inner;
                    c * g.data()[o * inner + i]
                });
                let _ = outer;
                accumulate(grads, *a, ta.shape(), it);
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = axis_geometry(val.shape(), *axis);
                let total = val.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let chunk = tp.shape()[*axis] * inner;
                    let it = (0..tp.len()).map(|j| {
                        let o = j / chunk.max(1);
                        let r = j % chunk.max(1);
                        g.data()[o * total + offset + r]
                    });
                    accumulate(grads, p, tp.shape(), it);
                    offset += chunk;
                }
                let _ = outer;
            }
            Op::Slice(a, axis, start, end) => {
                let ta = self.value(*a);
                let (outer, n, inner) = axis_geometry(ta.shape(), *axis);
                let w = end - start;
                let ga = acc_slot(grads, *a, ta.shape());
                for o in 0..outer {
                    for k in 0..w * inner {
                        ga.data_mut()[(o * n + start) * inner + k] += g.data()[o * w * inner + k];
                    }
                }
            }
            Op::SelectCols(a, idx) => {
                let ta = self.value(*a);
                let c = ta.shape()[1];
                let ga = acc_slot(grads, *a, ta.shape());
                for r in 0..ta.shape()[0] {
                    for (k, &j) in idx.iter().enumerate() {
                        ga.data_mut()[r * c + j] += g.data()[r * idx.len() + k];
                    }
                }
            }
            Op::Reshape(a) => {
                let ta = self.value(*a);
                accumulate(grads, *a, ta.shape(), g.data().iter().copied());
            }
            Op::Mmd(a, b, kernel) => {
                let (ga, gb) = crate::mmd::mmd_squared_grad(self.value(*a), self.value(*b), kernel);
                let s = g.item();
                accumulate(
                    grads,
                    *a,
                    self.value(*a).shape(),
                    ga.data().iter().map(|v| s * v),
                );
                accumulate(
                    grads,
                    *b,
                    self.value(*b).shape(),
                    gb.data().iter().map(|v| s * v),
                );
            }
        }
    }

    fn reduce_into(
        &self,
        grads: &mut [Option<Tensor>],
        b: Var,
        mode: Bcast,
        g: impl Iterator<Item = f64>,
    ) {
        let tb = self.value(b);
        match mode {
            Bcast::Same => accumulate(grads, b, tb.shape(), g),
            Bcast::Row => {
                let n = tb.len();
                let slot = acc_slot(grads, b, tb.shape());
                for (j, v) in g.enumerate() {
                    slot.data_mut()[j % n] += v;
                }
            }
            Bcast::Scalar => {
                let s: f64 = g.sum();
                let slot = acc_slot(grads, b, tb.shape());
                slot.data_mut()[0] += s;
            }
        }
    }
}

fn acc_slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], g: impl Iterator<Item = f64>) {
    match &mut grads[v.0] {
        Some(slot) => {
            for (s, x) in slot.data_mut().iter_mut().zip(g) {
                *s += x;
            }
        }
        empty => {
            let data: Vec<f64> = g.collect();
            *empty =
                Some(Tensor::new(shape.to_vec(), data).expect("adjoint matches operand shape"));
        }
    }
}

/// A sum whose result does not depend on the order of `xs`.
///
/// Terms are rounded to a fixed grid of 2^-100 times the largest magnitude
/// and added exactly in 128-bit integers. Non-finite input, tiny magnitudes
/// and very long slices fall back to summing in sorted order.
pub fn order_invariant_sum(xs: &mut [f64]) -> f64 {
    let m = xs.iter().fold(0.0f64, |m, x| {
        if x.is_nan() || m.is_nan() {
            f64::NAN
        } else {
            m.max(x.abs())
        }
    });
    if m == 0.0 {
        return 0.0;
    }
    if !m.is_finite() || m < 1e-280 || xs.len() >= 1 << 26 {
        xs.sort_unstable_by(f64::total_cmp);
        return xs.iter().sum();
    }
    let e = ((m.to_bits() >> 52) & 0x7ff) as i32 - 1022;
    let scale = 2f64.powi(100 - e);
    let total: i128 = xs.iter().map(|x| (x * scale).round() as i128).sum();
    total as f64 / scale
}

/// `tanh` through a single `exp`; agrees with `f64::tanh` to a few ulps
/// away from zero and switches to the odd series near it.
pub fn fast_tanh(x: f64) -> f64 {
    let a = x.abs();
    let y = if a < 0.05 {
        let x2 = a * a;
        a * (1.0
            + x2 * (-1.0 / 3.0
                + x2 * (2.0 / 15.0
                    + x2 * (-17.0 / 315.0 + x2 * (62.0 / 2835.0 - x2 * 1382.0 / 155_925.0)))))
    } else if a > 20.0 {
        1.0
    } else {
        let e = (-2.0 * a).exp();
        (1.0 - e) / (1.0 + e)
    };
    y.copysign(x)
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
