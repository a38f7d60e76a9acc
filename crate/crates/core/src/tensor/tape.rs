use super::{matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rank-1 right operand repeated over the left operand's leading axes
    Row,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug)]
struct AxisSplit {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisSplit {
    fn of(shape: &[usize], axis: usize) -> Self {
        AxisSplit {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, Var, Var, Broadcast),
    Affine(Var, f64),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var, AxisSplit),
    LogSoftmax(Var, AxisSplit),
    Concat(Vec<Var>, usize, Vec<usize>),
    Narrow(Var, usize, usize, usize, usize),
    Reshape(Var),
    Sum(Var),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    WeightedSum(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of a forward computation. Node order is the topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient buffers produced by [`Tape::backward`], one per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Raw gradient of `var`, or `None` when the loss does not depend on it.
    pub fn data(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }

    /// Gradient of `var`; unreachable nodes get a zero tensor.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros(&shape),
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape.clone(),
        right: b.shape.clone(),
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

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        };
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let bcast = if ta.shape == tb.shape {
            Broadcast::Same
        } else if tb.rank() == 1 && ta.rank() >= 1 && ta.shape.last() == tb.shape.first() {
            Broadcast::Row
        } else {
            return Err(shape_err(name, ta, tb));
        };
        let width = tb.numel().max(1);
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
        };
        let data = match bcast {
            Broadcast::Same => ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect(),
            Broadcast::Row => ta
                .data
                .iter()
                .enumerate()
                .map(|(i, x)| f(*x, tb.data[i % width]))
                .collect(),
        };
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary(kind, a, b, bcast), rg))
    }

    /// Elementwise sum; `b` may also be a vector broadcast over `a`'s last axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = &self.nodes[x.0].value;
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| scale * v + shift).collect(),
        };
        let rg = self.rg(x);
        self.push(value, Op::Affine(x, scale), rg)
    }

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (n, k, m) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut data = vec![0.0; n * m];
        matmul_kernel(&ta.data, &tb.data, &mut data, n, k, m);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    /// `a · bᵀ` for `a: [n×k]`, `b: [m×k]`; the usual `x·Wᵀ` of a linear layer.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[1] {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let (n, k, m) = (ta.shape[0], ta.shape[1], tb.shape[0]);
        let mut data = vec![0.0; n * m];
        matmul_nt_kernel(&ta.data, &tb.data, &mut data, n, k, m);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data,
            },
            Op::MatMulNt(a, b),
            rg,
        ))
    }

    /// `x · Wᵀ + b`
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let h = self.matmul_nt(x, weight)?;
        self.add(h, bias)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = &self.nodes[x.0].value;
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| f(*v)).collect(),
        };
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    /// Softmax along `axis`. Entries where `mask` is `false` are excluded from the
    /// normalization and come out exactly zero.
    pub fn softmax(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if axis >= t.rank() {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("axis {} out of range for shape {:?}", axis, t.shape),
            });
        }
        if let Some(m) = mask {
            if m.len() != t.numel() {
                return Err(TensorError::Invalid {
                    op: "softmax",
                    msg: format!("mask has {} entries for {} values", m.len(), t.numel()),
                });
            }
        }
        let split = AxisSplit::of(&t.shape, axis);
        let keep = |i: usize| mask.is_none_or(|m| m[i]);
        let mut data = vec![0.0; t.numel()];
        for o in 0..split.outer {
            for i in 0..split.inner {
                let idx = |j: usize| (o * split.len + j) * split.inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..split.len {
                    if keep(idx(j)) {
                        max = max.max(t.data[idx(j)]);
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(TensorError::Invalid {
                        op: "softmax",
                        msg: "every entry of a slice is masked".into(),
                    });
                }
                let mut total = 0.0;
                for j in 0..split.len {
                    if keep(idx(j)) {
                        let e = (t.data[idx(j)] - max).exp();
                        data[idx(j)] = e;
                        total += e;
                    }
                }
                for j in 0..split.len {
                    data[idx(j)] /= total;
                }
            }
        }
        let value = Tensor {
            shape: t.shape.clone(),
            data,
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x, split), rg))
    }

    /// `log softmax` along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.rank() == 0 {
            return Err(TensorError::Invalid {
                op: "log_softmax",
                msg: "needs rank >= 1".into(),
            });
        }
        let split = AxisSplit::of(&t.shape, t.rank() - 1);
        let mut data = t.data.clone();
        for row in data.chunks_mut(split.len) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor {
            shape: t.shape.clone(),
            data,
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSoftmax(x, split), rg))
    }

    /// Concatenates along `axis`; every other extent must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(p) => &self.nodes[p.0].value,
            None => {
                return Err(TensorError::Invalid {
                    op: "concat",
                    msg: "no inputs".into(),
                })
            }
        };
        if axis >= first.rank() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {} out of range for shape {:?}", axis, first.shape),
            });
        }
        let mut shape = first.shape.clone();
        shape[axis] = 0;
        let mut extents = Vec::with_capacity(parts.len());
        for p in parts {
            let t = &self.nodes[p.0].value;
            let compatible = t.rank() == first.rank()
                && t.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", first, t));
            }
            shape[axis] += t.shape[axis];
            extents.push(t.shape[axis]);
        }
        let split = AxisSplit::of(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..split.outer {
            for (p, ext) in parts.iter().zip(&extents) {
                let chunk = ext * split.inner;
                data.extend_from_slice(&self.nodes[p.0].value.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor { shape, data }, Op::Concat(parts.to_vec(), split.inner, extents), rg))
    }

    /// Slice `[start, start + len)` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if axis >= t.rank() || start + len > t.shape[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!("range {}..{} of axis {} in shape {:?}", start, start + len, axis, t.shape),
            });
        }
        let split = AxisSplit::of(&t.shape, axis);
        let mut shape = t.shape.clone();
        shape[axis] = len;
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..split.outer {
            let base = (o * split.len + start) * split.inner;
            data.extend_from_slice(&t.data[base..base + len * split.inner]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor { shape, data },
            Op::Narrow(x, split.outer, split.len * split.inner, start * split.inner, len * split.inner),
            rg,
        ))
    }

    /// Inverse of [`Tape::concat`] given the original extents.
    pub fn split(&mut self, x: Var, axis: usize, extents: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(extents.len());
        for &e in extents {
            out.push(self.narrow(x, axis, start, e)?);
            start += e;
        }
        if start != self.shape(x).get(axis).copied().unwrap_or(0) {
            return Err(TensorError::Invalid {
                op: "split",
                msg: format!("extents {:?} do not cover shape {:?}", extents, self.shape(x)),
            });
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.nodes[x.0].value.data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Rows of a rank-2 `table` selected by `indices` (embedding lookup, row repeat).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        if t.rank() != 2 {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("table must be rank 2, got {:?}", t.shape),
            });
        }
        let (rows, cols) = (t.shape[0], t.shape[1]);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::Invalid {
                    op: "gather_rows",
                    msg: format!("row {} out of range for {} rows", i, rows),
                });
            }
            data.extend_from_slice(&t.data[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor {
                shape: vec![indices.len(), cols],
                data,
            },
            Op::GatherRows(table, indices.to_vec()),
            rg,
        ))
    }

    /// `out[i] = x[i, indices[i]]` for a rank-2 `x`.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 2 || t.shape[0] != indices.len() {
            return Err(TensorError::Invalid {
                op: "pick",
                msg: format!("{} indices for shape {:?}", indices.len(), t.shape),
            });
        }
        let cols = t.shape[1];
        let mut data = Vec::with_capacity(indices.len());
        for (i, &j) in indices.iter().enumerate() {
            if j >= cols {
                return Err(TensorError::Invalid {
                    op: "pick",
                    msg: format!("column {} out of range for {} columns", j, cols),
                });
            }
            data.push(t.data[i * cols + j]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(data), Op::Pick(x, indices.to_vec()), rg))
    }

    /// Per-row convex combination: `out[b] = Σₖ weights[b,k] · items[b,k,:]`.
    pub fn weighted_sum(&mut self, weights: Var, items: Var) -> Result<Var> {
        let (w, e) = (&self.nodes[weights.0].value, &self.nodes[items.0].value);
        if w.rank() != 2 || e.rank() != 3 || w.shape[..] != e.shape[..2] {
            return Err(shape_err("weighted_sum", w, e));
        }
        let (b, k, d) = (e.shape[0], e.shape[1], e.shape[2]);
        let mut data = vec![0.0; b * d];
        for bi in 0..b {
            let out = &mut data[bi * d..(bi + 1) * d];
            for ki in 0..k {
                let a = w.data[bi * k + ki];
                if a == 0.0 {
                    continue;
                }
                let row = &e.data[(bi * k + ki) * d..(bi * k + ki + 1) * d];
                for (o, v) in out.iter_mut().zip(row) {
                    *o += a * v;
                }
            }
        }
        let rg = self.rg(weights) || self.rg(items);
        Ok(self.push(
            Tensor {
                shape: vec![b, d],
                data,
            },
            Op::WeightedSum(weights, items),
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 || lt.rank() > 1 {
            return Err(TensorError::NonScalarLoss(lt.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b, bcast) => {
                let (ta, tb) = (val(*a), val(*b));
                let width = tb.numel().max(1);
                let bi = |i: usize| match bcast {
                    Broadcast::Same => i,
                    Broadcast::Row => i % width,
                };
                match kind {
                    BinaryKind::Add | BinaryKind::Sub => {
                        acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, gi)| *o += gi));
                        let sign = if *kind == BinaryKind::Add { 1.0 } else { -1.0 };
                        acc(*b, &mut |buf| {
                            for (i, gi) in g.iter().enumerate() {
                                buf[bi(i)] += sign * gi;
                            }
                        });
                    }
                    BinaryKind::Mul => {
                        acc(*a, &mut |buf| {
                            for (i, gi) in g.iter().enumerate() {
                                buf[i] += gi * tb.data[bi(i)];
                            }
                        });
                        acc(*b, &mut |buf| {
                            for (i, gi) in g.iter().enumerate() {
                                buf[bi(i)] += gi * ta.data[i];
                            }
                        });
                    }
                }
            }
            Op::Affine(x, scale) => {
                acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, gi)| *o += scale * gi));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                // da = g·bᵀ, db = aᵀ·g
                acc(*a, &mut |buf| matmul_nt_kernel(g, &tb.data, buf, n, m, k));
                acc(*b, &mut |buf| matmul_tn_kernel(&ta.data, g, buf, n, k, m));
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.shape[0], ta.shape[1], tb.shape[0]);
                // out = a·bᵀ: da = g·b, db = gᵀ·a
                acc(*a, &mut |buf| {
                    let mut tmp = vec![0.0; n * k];
                    matmul_kernel(g, &tb.data, &mut tmp, n, m, k);
                    buf.iter_mut().zip(tmp).for_each(|(o, t)| *o += t);
                });
                acc(*b, &mut |buf| matmul_tn_kernel(g, &ta.data, buf, n, m, k));
            }
            Op::Sigmoid(x) => {
                let y = &node.value.data;
                acc(*x, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = &node.value.data;
                acc(*x, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Relu(x) => {
                let y = &node.value.data;
                acc(*x, &mut |buf| {
                    for i in 0..buf.len() {
                        if y[i] > 0.0 {
                            buf[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax(x, s) => {
                let y = &node.value.data;
                acc(*x, &mut |buf| {
                    for o in 0..s.outer {
                        for i in 0..s.inner {
                            let idx = |j: usize| (o * s.len + j) * s.inner + i;
                            let dot: f64 = (0..s.len).map(|j| y[idx(j)] * g[idx(j)]).sum();
                            for j in 0..s.len {
                                buf[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(x, s) => {
                let y = &node.value.data;
                acc(*x, &mut |buf| {
                    for r in 0..s.outer {
                        let row = r * s.len..(r + 1) * s.len;
                        let gsum: f64 = g[row.clone()].iter().sum();
                        for j in row {
                            buf[j] += g[j] - y[j].exp() * gsum;
                        }
                    }
                });
            }
            Op::Concat(parts, inner, extents) => {
                let total: usize = extents.iter().sum::<usize>() * inner;
                let outer = g.len() / total.max(1);
                let mut offset = 0;
                for (p, ext) in parts.iter().zip(extents) {
                    let chunk = ext * inner;
                    acc(*p, &mut |buf| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            buf[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(b, s)| *b += s);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Narrow(x, outer, stride, start, len) => {
                acc(*x, &mut |buf| {
                    for o in 0..*outer {
                        let dst = &mut buf[o * stride + start..o * stride + start + len];
                        dst.iter_mut().zip(&g[o * len..(o + 1) * len]).for_each(|(b, s)| *b += s);
                    }
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, gi)| *o += gi));
            }
            Op::Sum(x) => {
                let g0 = g[0];
                acc(*x, &mut |buf| buf.iter_mut().for_each(|o| *o += g0));
            }
            Op::GatherRows(table, indices) => {
                let cols = val(*table).shape[1];
                acc(*table, &mut |buf| {
                    for (r, &i) in indices.iter().enumerate() {
                        let dst = &mut buf[i * cols..(i + 1) * cols];
                        dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(b, s)| *b += s);
                    }
                });
            }
            Op::Pick(x, indices) => {
                let cols = val(*x).shape[1];
                acc(*x, &mut |buf| {
                    for (r, &j) in indices.iter().enumerate() {
                        buf[r * cols + j] += g[r];
                    }
                });
            }
            Op::WeightedSum(w, e) => {
                let (tw, te) = (val(*w), val(*e));
                let (b, k, d) = (te.shape[0], te.shape[1], te.shape[2]);
                acc(*w, &mut |buf| {
                    for bi in 0..b {
                        let gr = &g[bi * d..(bi + 1) * d];
                        for ki in 0..k {
                            let row = &te.data[(bi * k + ki) * d..(bi * k + ki + 1) * d];
                            buf[bi * k + ki] += gr.iter().zip(row).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*e, &mut |buf| {
                    for bi in 0..b {
                        let gr = &g[bi * d..(bi + 1) * d];
                        for ki in 0..k {
                            let a = tw.data[bi * k + ki];
                            let dst = &mut buf[(bi * k + ki) * d..(bi * k + ki + 1) * d];
                            dst.iter_mut().zip(gr).for_each(|(o, gv)| *o += a * gv);
                        }
                    }
                });
            }
        }
    }
}
