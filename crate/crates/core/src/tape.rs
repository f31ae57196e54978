//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every primitive pushes one node onto the [`Tape`]; nodes only ever refer to
//! earlier nodes, so the tape is already in topological order and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use stagnn::tape::Tape;
//! use stagnn::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```
//!
//! Subgradient convention: `relu` and `leaky_relu` use the left branch at
//! exactly zero (derivative `0` and `slope` respectively).

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Exp(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax { x: Var, axis: usize },
    MaskedSoftmax { x: Var, mask: Rc<[bool]> },
    Sum { x: Var, axis: Option<usize> },
    Mean { x: Var, axis: Option<usize> },
    Concat { a: Var, b: Var, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Dropout { x: Var, mask: Vec<f64> },
    Conv1d { x: Var, w: Var, dilation: usize, cols: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Single-owner record of executed primitives.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
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

    /// Drops all recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last [`backward`](Self::backward), if any.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_owned(&self, vars: &[Var]) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage("tape already consumed by backward; reset it".into()));
        }
        match vars.iter().find(|v| v.0 >= self.nodes.len()) {
            Some(v) => Err(Error::Usage(format!("variable {} is not on this tape", v.0))),
            None => Ok(()),
        }
    }

    // ---------------------------------------------------------------- binary

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.check_owned(&[a, b])?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(ta.shape(), tb.shape())?;
        let mut out = vec![0.0; out_shape.iter().product()];
        if ta.shape() == tb.shape() {
            for ((o, &x), &y) in out.iter_mut().zip(ta.data()).zip(tb.data()) {
                *o = f(x, y);
            }
        } else {
            let sa = broadcast_strides(ta.shape(), &out_shape);
            let sb = broadcast_strides(tb.shape(), &out_shape);
            let (da, db) = (ta.data(), tb.data());
            walk_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(da[ia], db[ib]));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, out)?, op, rg))
    }

    // ----------------------------------------------------------------- unary

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        self.check_owned(&[x])?;
        let out = self.value(x).map(f);
        let rg = self.rg(x);
        Ok(self.push(out, op, rg))
    }

    // ------------------------------------------------------------ structural

    /// Matrix product over the last two axes.
    ///
    /// Supported ranks: 2×2, 3×2 and 2×3 (the rank-2 operand is shared across
    /// the batch), and 3×3 with equal batch sizes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_owned(&[a, b])?;
        let dims = MatDims::new(self.value(a).shape(), self.value(b).shape())?;
        let mut out = vec![0.0; dims.out_numel()];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..dims.batch {
            gemm(
                dims.m,
                dims.k,
                dims.n,
                &da[i * dims.a_stride..],
                false,
                &db[i * dims.b_stride..],
                false,
                &mut out[i * dims.m * dims.n..],
                false,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(dims.out_shape.clone(), out)?, Op::MatMul(a, b), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check_owned(&[x])?;
        let out = self.value(x).transposed()?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.check_owned(&[x])?;
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_owned(&[x])?;
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis)?;
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| out[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (out[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        let y = Tensor::new(shape, out)?;
        if !y.is_finite() {
            return Err(Error::NonFinite("softmax".into()));
        }
        Ok(self.push(y, Op::Softmax { x, axis }, rg))
    }

    /// Softmax over the last axis restricted to entries where `mask` is true.
    ///
    /// `mask` covers the trailing `[rows, cols]` block and is shared across
    /// any leading axes. Masked-out entries are exactly zero. Every row must
    /// keep at least one entry.
    pub fn masked_softmax(&mut self, x: Var, mask: Rc<[bool]>) -> Result<Var> {
        self.check_owned(&[x])?;
        let t = self.value(x);
        let r = t.rank();
        if r < 2 {
            return Err(Error::Dimension("masked softmax needs rank >= 2".into()));
        }
        let (rows, cols) = (t.shape()[r - 2], t.shape()[r - 1]);
        if mask.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "mask of length {} does not cover a {rows}x{cols} block",
                mask.len()
            )));
        }
        if mask.chunks(cols).any(|row| !row.iter().any(|&m| m)) {
            return Err(Error::Usage("masked softmax row has no admissible entries".into()));
        }
        let mut out = vec![0.0; t.numel()];
        for (block_in, block_out) in t.data().chunks(rows * cols).zip(out.chunks_mut(rows * cols)) {
            for ((row_in, row_out), row_mask) in block_in
                .chunks(cols)
                .zip(block_out.chunks_mut(cols))
                .zip(mask.chunks(cols))
            {
                let max = row_in
                    .iter()
                    .zip(row_mask)
                    .filter(|(_, &m)| m)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for ((o, &v), &m) in row_out.iter_mut().zip(row_in).zip(row_mask) {
                    if m {
                        *o = (v - max).exp();
                        total += *o;
                    }
                }
                for o in row_out.iter_mut() {
                    *o /= total;
                }
            }
        }
        let y = Tensor::new(t.shape().to_vec(), out)?;
        if !y.is_finite() {
            return Err(Error::NonFinite("masked softmax".into()));
        }
        let rg = self.rg(x);
        Ok(self.push(y, Op::MaskedSoftmax { x, mask }, rg))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, None, false)
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, None, true)
    }

    /// Sum along `axis`; the axis is removed (rank-1 inputs give shape `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, Some(axis), false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, Some(axis), true)
    }

    fn reduce(&mut self, x: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        self.check_owned(&[x])?;
        let t = self.value(x);
        let (out_shape, out) = match axis {
            None => {
                let s: f64 = t.data().iter().sum();
                let v = if mean { s / t.numel() as f64 } else { s };
                (vec![1], vec![v])
            }
            Some(axis) => {
                let (outer, len, inner) = axis_split(t.shape(), axis)?;
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            out[o * inner + i] += t.data()[o * len * inner + j * inner + i];
                        }
                    }
                }
                if mean {
                    out.iter_mut().for_each(|v| *v /= len as f64);
                }
                let mut shape = t.shape().to_vec();
                shape.remove(axis);
                if shape.is_empty() {
                    shape.push(1);
                }
                (shape, out)
            }
        };
        let rg = self.rg(x);
        let op = if mean { Op::Mean { x, axis } } else { Op::Sum { x, axis } };
        Ok(self.push(Tensor::new(out_shape, out)?, op, rg))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        self.check_owned(&[a, b])?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(sb).enumerate().all(|(d, (x, y))| d == axis || x == y);
        if !compatible {
            return Err(Error::Dimension(format!(
                "cannot concat {sa:?} and {sb:?} along axis {axis}"
            )));
        }
        let (outer, la, inner) = axis_split(sa, axis)?;
        let lb = sb[axis];
        let mut out = Vec::with_capacity(ta.numel() + tb.numel());
        for o in 0..outer {
            out.extend_from_slice(&ta.data()[o * la * inner..(o + 1) * la * inner]);
            out.extend_from_slice(&tb.data()[o * lb * inner..(o + 1) * lb * inner]);
        }
        let mut shape = sa.to_vec();
        shape[axis] = la + lb;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { a, b, axis }, rg))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_owned(&[x])?;
        let t = self.value(x);
        let (outer, full, inner) = axis_split(t.shape(), axis)?;
        if len == 0 || start + len > full {
            return Err(Error::Dimension(format!(
                "narrow [{start}, {}) out of range for axis of length {full}",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Narrow { x, axis, start }, rg))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)` in training
    /// mode; identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        self.check_owned(&[x])?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout rate {p} must lie in [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let y = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Dropout { x, mask }, rg))
    }

    /// Dilated causal 1-D convolution without bias.
    ///
    /// `x` is `[C_in, L]` or `[B, C_in, L]`, `w` is `[C_out, C_in, K]`. The
    /// input is implicitly left-padded with `(K - 1) * dilation` zeros, so the
    /// output keeps length `L` and position `t` only sees inputs at `<= t`.
    /// Kernel tap `K - 1` aligns with the current step.
    pub fn conv1d_causal(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        self.check_owned(&[x, w])?;
        if dilation == 0 {
            return Err(Error::Parameter("dilation must be positive".into()));
        }
        let (tx, tw) = (self.value(x), self.value(w));
        let geo = ConvGeometry::new(tx.shape(), tw.shape(), dilation)?;
        let cols = geo.im2col(tx.data());
        let mut out = vec![0.0; geo.batch * geo.c_out * geo.len];
        let ck = geo.c_in * geo.kernel;
        for b in 0..geo.batch {
            gemm(
                geo.c_out,
                ck,
                geo.len,
                tw.data(),
                false,
                &cols[b * ck * geo.len..],
                false,
                &mut out[b * geo.c_out * geo.len..],
                false,
            );
        }
        let shape = if tx.rank() == 2 {
            vec![geo.c_out, geo.len]
        } else {
            vec![geo.batch, geo.c_out, geo.len]
        };
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv1d { x, w, dilation, cols }, rg))
    }

    // -------------------------------------------------------------- backward

    /// Populates gradients of `loss` with respect to every differentiable
    /// node. The tape is consumed: a second call without
    /// [`reset`](Self::reset) is a usage error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage("backward called twice on the same tape".into()));
        }
        self.check_owned(&[loss])?;
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_ref() else { continue };
            if !node.requires_grad {
                continue;
            }
            propagate(before, node, g);
        }
        Ok(())
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Adds `delta` into the gradient buffer of `v`, if it is differentiable.
fn accumulate(nodes: &mut [Node], v: Var, delta: impl FnOnce(&mut [f64])) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let n = node.value.numel();
    let buf = node.grad.get_or_insert_with(|| vec![0.0; n]);
    delta(buf);
}

fn propagate(nodes: &mut [Node], node: &Node, g: &[f64]) {
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let out_shape = node.value.shape();
            let (sa, sb) = (nodes[a.0].value.shape().to_vec(), nodes[b.0].value.shape().to_vec());
            accumulate(nodes, *a, |ga| unbroadcast_into(ga, &sa, out_shape, g, 1.0));
            accumulate(nodes, *b, |gb| unbroadcast_into(gb, &sb, out_shape, g, sign));
        }
        Op::Mul(a, b) => {
            let out_shape = node.value.shape();
            let ta = nodes[a.0].value.clone();
            let tb = nodes[b.0].value.clone();
            let sa = broadcast_strides(ta.shape(), out_shape);
            let sb = broadcast_strides(tb.shape(), out_shape);
            accumulate(nodes, *a, |ga| {
                walk_broadcast(out_shape, &sa, &sb, |o, ia, ib| ga[ia] += g[o] * tb.data()[ib]);
            });
            accumulate(nodes, *b, |gb| {
                walk_broadcast(out_shape, &sa, &sb, |o, ia, ib| gb[ib] += g[o] * ta.data()[ia]);
            });
        }
        Op::Scale(x, c) => accumulate(nodes, *x, |gx| {
            gx.iter_mut().zip(g).for_each(|(d, &gi)| *d += c * gi);
        }),
        Op::Relu(x) => {
            let xv = nodes[x.0].value.data().to_vec();
            accumulate(nodes, *x, |gx| {
                for ((d, &gi), &v) in gx.iter_mut().zip(g).zip(&xv) {
                    if v > 0.0 {
                        *d += gi;
                    }
                }
            });
        }
        Op::LeakyRelu(x, slope) => {
            let xv = nodes[x.0].value.data().to_vec();
            accumulate(nodes, *x, |gx| {
                for ((d, &gi), &v) in gx.iter_mut().zip(g).zip(&xv) {
                    *d += if v > 0.0 { gi } else { slope * gi };
                }
            });
        }
        Op::Sigmoid(x) => accumulate(nodes, *x, |gx| {
            for ((d, &gi), &s) in gx.iter_mut().zip(g).zip(y) {
                *d += gi * s * (1.0 - s);
            }
        }),
        Op::Exp(x) => accumulate(nodes, *x, |gx| {
            for ((d, &gi), &e) in gx.iter_mut().zip(g).zip(y) {
                *d += gi * e;
            }
        }),
        Op::MatMul(a, b) => {
            let ta = nodes[a.0].value.clone();
            let tb = nodes[b.0].value.clone();
            let dims = MatDims::new(ta.shape(), tb.shape()).expect("validated in forward");
            let mn = dims.m * dims.n;
            // Shared operands (batch stride 0) accumulate across the batch.
            accumulate(nodes, *a, |ga| {
                for i in 0..dims.batch {
                    gemm(
                        dims.m,
                        dims.n,
                        dims.k,
                        &g[i * mn..],
                        false,
                        &tb.data()[i * dims.b_stride..],
                        true,
                        &mut ga[i * dims.a_stride..],
                        true,
                    );
                }
            });
            accumulate(nodes, *b, |gb| {
                for i in 0..dims.batch {
                    gemm(
                        dims.k,
                        dims.m,
                        dims.n,
                        &ta.data()[i * dims.a_stride..],
                        true,
                        &g[i * mn..],
                        false,
                        &mut gb[i * dims.b_stride..],
                        true,
                    );
                }
            });
        }
        Op::Transpose(x) => {
            let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec())
                .and_then(|t| t.transposed())
                .expect("transpose of valid grad");
            accumulate(nodes, *x, |gx| {
                gx.iter_mut().zip(gt.data()).for_each(|(d, v)| *d += v);
            });
        }
        Op::Reshape(x) | Op::Dropout { x, .. } => {
            let mask = match &node.op {
                Op::Dropout { mask, .. } => Some(mask),
                _ => None,
            };
            accumulate(nodes, *x, |gx| match mask {
                Some(m) => gx
                    .iter_mut()
                    .zip(g)
                    .zip(m)
                    .for_each(|((d, gi), mi)| *d += gi * mi),
                None => gx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi),
            });
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = axis_split(node.value.shape(), *axis).expect("valid axis");
            accumulate(nodes, *x, |gx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            });
        }
        Op::MaskedSoftmax { x, mask } => {
            let cols = *node.value.shape().last().expect("rank >= 2");
            accumulate(nodes, *x, |gx| {
                for ((gx_row, g_row), y_row) in
                    gx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols))
                {
                    let dot: f64 = g_row.iter().zip(y_row).map(|(a, b)| a * b).sum();
                    for ((d, &gi), &yi) in gx_row.iter_mut().zip(g_row).zip(y_row) {
                        *d += yi * (gi - dot);
                    }
                }
            });
            let _ = mask;
        }
        Op::Sum { x, axis } | Op::Mean { x, axis } => {
            let mean = matches!(node.op, Op::Mean { .. });
            let in_shape = nodes[x.0].value.shape().to_vec();
            let numel = nodes[x.0].value.numel();
            match axis {
                None => {
                    let d = if mean { g[0] / numel as f64 } else { g[0] };
                    accumulate(nodes, *x, |gx| gx.iter_mut().for_each(|v| *v += d));
                }
                Some(axis) => {
                    let (outer, len, inner) = axis_split(&in_shape, *axis).expect("valid axis");
                    let f = if mean { 1.0 / len as f64 } else { 1.0 };
                    accumulate(nodes, *x, |gx| {
                        for o in 0..outer {
                            for j in 0..len {
                                for i in 0..inner {
                                    gx[o * len * inner + j * inner + i] += f * g[o * inner + i];
                                }
                            }
                        }
                    });
                }
            }
        }
        Op::Concat { a, b, axis } => {
            let sa = nodes[a.0].value.shape().to_vec();
            let lb = nodes[b.0].value.shape()[*axis];
            let (outer, la, inner) = axis_split(&sa, *axis).expect("valid axis");
            let total = (la + lb) * inner;
            accumulate(nodes, *a, |ga| {
                for o in 0..outer {
                    for (d, v) in ga[o * la * inner..(o + 1) * la * inner]
                        .iter_mut()
                        .zip(&g[o * total..o * total + la * inner])
                    {
                        *d += v;
                    }
                }
            });
            accumulate(nodes, *b, |gb| {
                for o in 0..outer {
                    for (d, v) in gb[o * lb * inner..(o + 1) * lb * inner]
                        .iter_mut()
                        .zip(&g[o * total + la * inner..(o + 1) * total])
                    {
                        *d += v;
                    }
                }
            });
        }
        Op::Narrow { x, axis, start } => {
            let in_shape = nodes[x.0].value.shape().to_vec();
            let (outer, full, inner) = axis_split(&in_shape, *axis).expect("valid axis");
            let len = node.value.shape()[*axis];
            accumulate(nodes, *x, |gx| {
                for o in 0..outer {
                    let base = o * full * inner + start * inner;
                    for (d, v) in gx[base..base + len * inner]
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                    {
                        *d += v;
                    }
                }
            });
        }
        Op::Conv1d { x, w, dilation, cols } => {
            let tw = nodes[w.0].value.clone();
            let geo = ConvGeometry::new(nodes[x.0].value.shape(), tw.shape(), *dilation)
                .expect("validated in forward");
            let ck = geo.c_in * geo.kernel;
            let ol = geo.c_out * geo.len;
            accumulate(nodes, *w, |gw| {
                for b in 0..geo.batch {
                    gemm(
                        geo.c_out,
                        geo.len,
                        ck,
                        &g[b * ol..],
                        false,
                        &cols[b * ck * geo.len..],
                        true,
                        gw,
                        true,
                    );
                }
            });
            if nodes[x.0].requires_grad {
                let mut dcols = vec![0.0; cols.len()];
                for b in 0..geo.batch {
                    gemm(
                        ck,
                        geo.c_out,
                        geo.len,
                        tw.data(),
                        true,
                        &g[b * ol..],
                        false,
                        &mut dcols[b * ck * geo.len..],
                        false,
                    );
                }
                accumulate(nodes, *x, |gx| geo.col2im_into(&dcols, gx));
            }
        }
    }
}

// ------------------------------------------------------------------ helpers

/// Row-major `c (m×n) = a (m×k) · b (k×n)`, optionally reading `a` / `b` as
/// stored transposed and optionally accumulating into `c`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slice length checks above cover every element addressed by
    // the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_stride: usize,
    b_stride: usize,
    out_shape: Vec<usize>,
}

impl MatDims {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        let err = || Error::Dimension(format!("cannot matmul {sa:?} by {sb:?}"));
        let dims = match (sa, sb) {
            (&[m, k], &[k2, n]) if k == k2 => Self {
                batch: 1,
                m,
                k,
                n,
                a_stride: 0,
                b_stride: 0,
                out_shape: vec![m, n],
            },
            // The batch folds into rows of a single product.
            (&[bs, m, k], &[k2, n]) if k == k2 => Self {
                batch: 1,
                m: bs * m,
                k,
                n,
                a_stride: 0,
                b_stride: 0,
                out_shape: vec![bs, m, n],
            },
            (&[m, k], &[bs, k2, n]) if k == k2 => Self {
                batch: bs,
                m,
                k,
                n,
                a_stride: 0,
                b_stride: k * n,
                out_shape: vec![bs, m, n],
            },
            (&[ba, m, k], &[bb, k2, n]) if k == k2 && ba == bb => Self {
                batch: ba,
                m,
                k,
                n,
                a_stride: m * k,
                b_stride: k * n,
                out_shape: vec![ba, m, n],
            },
            _ => return Err(err()),
        };
        Ok(dims)
    }

    fn out_numel(&self) -> usize {
        self.out_shape.iter().product()
    }
}

struct ConvGeometry {
    batch: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    len: usize,
    dilation: usize,
}

impl ConvGeometry {
    fn new(sx: &[usize], sw: &[usize], dilation: usize) -> Result<Self> {
        let (batch, c_in, len) = match *sx {
            [c, l] => (1, c, l),
            [b, c, l] => (b, c, l),
            _ => return Err(Error::Dimension(format!("conv input must be rank 2 or 3, got {sx:?}"))),
        };
        let &[c_out, c_in_w, kernel] = sw else {
            return Err(Error::Dimension(format!("conv kernel must be rank 3, got {sw:?}")));
        };
        if c_in_w != c_in {
            return Err(Error::Dimension(format!(
                "conv kernel expects {c_in_w} input channels, input has {c_in}"
            )));
        }
        Ok(Self {
            batch,
            c_in,
            c_out,
            kernel,
            len,
            dilation,
        })
    }

    /// Offset into the past for kernel tap `k`.
    fn lag(&self, k: usize) -> usize {
        (self.kernel - 1 - k) * self.dilation
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let ck = self.c_in * self.kernel;
        let mut cols = vec![0.0; self.batch * ck * self.len];
        for b in 0..self.batch {
            for c in 0..self.c_in {
                let src = &x[(b * self.c_in + c) * self.len..][..self.len];
                for k in 0..self.kernel {
                    let lag = self.lag(k);
                    if lag >= self.len {
                        continue;
                    }
                    let dst = &mut cols[(b * ck + c * self.kernel + k) * self.len..][..self.len];
                    dst[lag..].copy_from_slice(&src[..self.len - lag]);
                }
            }
        }
        cols
    }

    fn col2im_into(&self, dcols: &[f64], dx: &mut [f64]) {
        let ck = self.c_in * self.kernel;
        for b in 0..self.batch {
            for c in 0..self.c_in {
                let dst = &mut dx[(b * self.c_in + c) * self.len..][..self.len];
                for k in 0..self.kernel {
                    let lag = self.lag(k);
                    if lag >= self.len {
                        continue;
                    }
                    let src = &dcols[(b * ck + c * self.kernel + k) * self.len..][..self.len];
                    for (d, s) in dst[..self.len - lag].iter_mut().zip(&src[lag..]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Dimension(format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let dim = |s: &[usize], i: usize| {
        let pad = rank - s.len();
        if i < pad {
            1
        } else {
            s[i - pad]
        }
    };
    (0..rank)
        .map(|i| match (dim(a, i), dim(b, i)) {
            (x, y) if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(Error::Dimension(format!("shapes {a:?} and {b:?} do not broadcast"))),
        })
        .collect()
}

/// Strides of `shape` viewed inside `out`, with zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[pad + i] = if shape[i] == 1 && out[pad + i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn walk_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let total: usize = out.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums `g` (shaped `out`) down onto an operand of shape `shape`.
fn unbroadcast_into(dst: &mut [f64], shape: &[usize], out: &[usize], g: &[f64], sign: f64) {
    if shape == out {
        dst.iter_mut().zip(g).for_each(|(d, v)| *d += sign * v);
        return;
    }
    let s = broadcast_strides(shape, out);
    walk_broadcast(out, &s, &s, |o, i, _| dst[i] += sign * g[o]);
}
