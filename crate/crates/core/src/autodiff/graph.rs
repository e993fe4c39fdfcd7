//! Tape of tensor operations with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and `backward` walks it once in reverse. Gradients
//! accumulate additively into every node that requires them; call
//! [`Graph::zero_grad`] before a second `backward` on the same tape.

use super::tensor::{axis_split, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Sqrt(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LogSumExp { input: NodeId, axis: usize },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { input: NodeId, axis: usize, start: usize },
    Sum(NodeId),
    Mean(NodeId),
    SumAxis { input: NodeId, axis: usize },
    MeanAxis { input: NodeId, axis: usize },
    Gather { input: NodeId, indices: Vec<usize> },
    Embedding { table: NodeId, ids: Vec<usize> },
    Reshape(NodeId),
    GradReverse { input: NodeId, alpha: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "multiply",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Sqrt(_) => "sqrt",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LogSumExp { .. } => "logsumexp",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Gather { .. } => "gather",
            Op::Embedding { .. } => "embedding",
            Op::Reshape(_) => "reshape",
            Op::GradReverse { .. } => "gradient_reversal",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
}

/// A single-threaded computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
    mutated: bool,
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

    /// Trainable leaf: receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Non-trainable leaf (inputs, masks, frozen parameters).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            grad: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Overwrites a leaf's value. Nodes computed from it become stale, so a
    /// subsequent `backward` is refused.
    pub fn set_leaf_value(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::invalid("set_leaf_value on a non-leaf node"));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_leaf_value",
                format!("{:?} vs {:?}", node.value.shape(), value.shape()),
            ));
        }
        node.value = value;
        if id.0 + 1 < self.nodes.len() {
            self.mutated = true;
        }
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient, if `backward` reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradient, or zeros of the node's shape when none reached it.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor {
        self.grad(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(id)))
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Sqrt(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a) => vec![*a],
            Op::LogSumExp { input, .. }
            | Op::Slice { input, .. }
            | Op::SumAxis { input, .. }
            | Op::MeanAxis { input, .. }
            | Op::Gather { input, .. }
            | Op::GradReverse { input, .. } => vec![*input],
            Op::Embedding { table, .. } => vec![*table],
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        self.push(Op::MatMul(a, b), Tensor::new(vec![n, m], out)?)
    }

    fn broadcast_check(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || (sa.len() == sb.len() + 1 && &sa[1..] == sb) {
            Ok(())
        } else {
            Err(Error::shape(
                op,
                format!("{sa:?} and {sb:?} (only leading-dimension broadcast of the right operand)"),
            ))
        }
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        self.broadcast_check(op.name(), a, b)?;
        let va = self.value(a);
        let vb = self.value(b).data();
        let m = vb.len();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb[i % m]))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(op, value)
    }

    /// Elementwise sum; `b` may omit `a`'s leading dimension.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| c * x);
        self.push(Op::Scale(a, c), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Numerical("sqrt of a non-positive value".into()));
        }
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let cols = v.cols();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        self.push(Op::Softmax(a), value)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let cols = v.cols();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(cols) {
            let lse = logsumexp_slice(row);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        self.push(Op::LogSoftmax(a), value)
    }

    /// Log-sum-exp reduction over `axis`; the axis is removed (a rank-1 input
    /// reduces to shape `[1]`).
    pub fn logsumexp(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape("logsumexp", format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (k, b) in buf.iter_mut().enumerate() {
                    *b = x[(o * len + k) * inner + i];
                }
                out[o * inner + i] = logsumexp_slice(&buf);
            }
        }
        let value = Tensor::new(reduced_shape(&shape, axis), out)?;
        self.push(Op::LogSumExp { input: a, axis }, value)
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &id in inputs {
            let s = self.shape(id);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &id in inputs {
                let v = self.value(id);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            value,
        )
    }

    /// `[start, end)` along `axis`.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {end}) along axis {axis} of {shape:?}"),
            ));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let width = (end - start) * inner;
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&x[base..base + width]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        let value = Tensor::new(new_shape, out)?;
        self.push(Op::Slice { input: a, axis, start }, value)
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Mean of all entries, shape `[1]`.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let m = v.sum() / v.numel() as f64;
        self.push(Op::Mean(a), Tensor::scalar(m))
    }

    fn reduce_axis(&mut self, a: NodeId, axis: usize, mean: bool) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let op_name = if mean { "mean_axis" } else { "sum_axis" };
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape(op_name, format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let row = &x[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if mean {
            for v in &mut out {
                *v /= len as f64;
            }
        }
        let value = Tensor::new(reduced_shape(&shape, axis), out)?;
        let op = if mean {
            Op::MeanAxis { input: a, axis }
        } else {
            Op::SumAxis { input: a, axis }
        };
        self.push(op, value)
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis(a, axis, true)
    }

    /// Selects entries by flat (row-major) index into a 1-D tensor.
    pub fn gather(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let v = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.numel()) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range for {:?}", v.shape()),
            ));
        }
        let out: Vec<f64> = indices.iter().map(|&i| v.data()[i]).collect();
        let value = Tensor::vector(out);
        self.push(
            Op::Gather {
                input: a,
                indices: indices.to_vec(),
            },
            value,
        )
    }

    /// Row lookup in a `[V, E]` table, giving `[ids.len(), E]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("embedding", format!("table {:?}", t.shape())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.shape()[0]) {
            return Err(Error::shape(
                "embedding",
                format!("id {bad} out of range for table {:?}", t.shape()),
            ));
        }
        let mut out = Vec::with_capacity(ids.len() * t.cols());
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![ids.len(), t.cols()], out)?;
        self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            value,
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push(Op::Reshape(a), value)
    }

    /// Identity forward; backward multiplies the upstream gradient by `-alpha`.
    pub fn gradient_reversal(&mut self, a: NodeId, alpha: f64) -> Result<NodeId> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::invalid(format!(
                "gradient reversal needs a finite alpha >= 0, got {alpha}"
            )));
        }
        let value = self.value(a).clone();
        self.push(Op::GradReverse { input: a, alpha }, value)
    }

    // ----------------------------------------------------------- backward

    /// Accumulates `d root / d node` into every node that requires a gradient.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this graph; call zero_grad first".into(),
            ));
        }
        if self.mutated {
            return Err(Error::Backward(
                "a leaf was modified after dependent nodes were computed".into(),
            ));
        }
        if !self.value(root).is_scalar() {
            return Err(Error::Backward(format!(
                "root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.backward_done = true;
        let seed = Tensor::full(self.shape(root), 1.0);
        self.accumulate(root, seed);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(upstream) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &upstream)?;
            self.nodes[idx].grad = Some(upstream);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, g: Tensor) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => existing.add_assign(&g),
            None => node.grad = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&mut self, idx: usize, up: &Tensor) -> Result<()> {
        let op = self.nodes[idx].op.clone();
        let out = &self.nodes[idx].value;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let (n, k, m) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                let ga = self
                    .wants(a)
                    .then(|| matmul_bt(up.data(), vb.data(), n, m, k));
                let gb = self
                    .wants(b)
                    .then(|| matmul_at(va.data(), up.data(), n, k, m));
                if let Some(ga) = ga {
                    self.accumulate(a, Tensor::new(vec![n, k], ga)?);
                }
                if let Some(gb) = gb {
                    self.accumulate(b, Tensor::new(vec![k, m], gb)?);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(a) {
                    self.accumulate(a, up.clone());
                }
                if self.wants(b) {
                    let g = fold_leading(up, self.value(b).numel(), sign);
                    let shape = self.shape(b).to_vec();
                    self.accumulate(b, Tensor::new(shape, g)?);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let m = vb.len();
                let ga = self.wants(a).then(|| {
                    up.data()
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * vb[i % m])
                        .collect::<Vec<_>>()
                });
                let gb = self.wants(b).then(|| {
                    let mut acc = vec![0.0; m];
                    for (i, g) in up.data().iter().enumerate() {
                        acc[i % m] += g * va[i];
                    }
                    acc
                });
                if let Some(ga) = ga {
                    let shape = self.shape(a).to_vec();
                    self.accumulate(a, Tensor::new(shape, ga)?);
                }
                if let Some(gb) = gb {
                    let shape = self.shape(b).to_vec();
                    self.accumulate(b, Tensor::new(shape, gb)?);
                }
            }
            Op::Scale(a, c) => {
                let g = up.map(|g| c * g);
                self.accumulate(a, g);
            }
            Op::Tanh(a) => {
                let g = zip_map(up, out, |g, y| g * (1.0 - y * y));
                self.accumulate(a, g);
            }
            Op::Sigmoid(a) => {
                let g = zip_map(up, out, |g, y| g * y * (1.0 - y));
                self.accumulate(a, g);
            }
            Op::Relu(a) => {
                let g = zip_map(up, self.value(a), |g, x| if x > 0.0 { g } else { 0.0 });
                self.accumulate(a, g);
            }
            Op::Sqrt(a) => {
                let g = zip_map(up, out, |g, y| g / (2.0 * y));
                self.accumulate(a, g);
            }
            Op::Softmax(a) => {
                let cols = out.cols();
                let mut g = vec![0.0; out.numel()];
                for ((gr, ur), yr) in g
                    .chunks_mut(cols)
                    .zip(up.data().chunks(cols))
                    .zip(out.data().chunks(cols))
                {
                    let dot: f64 = ur.iter().zip(yr).map(|(u, y)| u * y).sum();
                    for ((gi, u), y) in gr.iter_mut().zip(ur).zip(yr) {
                        *gi = y * (u - dot);
                    }
                }
                let shape = out.shape().to_vec();
                self.accumulate(a, Tensor::new(shape, g)?);
            }
            Op::LogSoftmax(a) => {
                let cols = out.cols();
                let mut g = vec![0.0; out.numel()];
                for ((gr, ur), yr) in g
                    .chunks_mut(cols)
                    .zip(up.data().chunks(cols))
                    .zip(out.data().chunks(cols))
                {
                    let total: f64 = ur.iter().sum();
                    for ((gi, u), y) in gr.iter_mut().zip(ur).zip(yr) {
                        *gi = u - y.exp() * total;
                    }
                }
                let shape = out.shape().to_vec();
                self.accumulate(a, Tensor::new(shape, g)?);
            }
            Op::LogSumExp { input, axis } => {
                let x = self.value(input);
                let shape = x.shape().to_vec();
                let (outer, len, inner) = axis_split(&shape, axis);
                let mut g = vec![0.0; x.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let r = o * inner + i;
                        for k in 0..len {
                            let j = (o * len + k) * inner + i;
                            g[j] = up.data()[r] * (x.data()[j] - out.data()[r]).exp();
                        }
                    }
                }
                self.accumulate(input, Tensor::new(shape, g)?);
            }
            Op::Concat { inputs, axis } => {
                let shape = out.shape().to_vec();
                let (outer, _, inner) = axis_split(&shape, axis);
                let mut offset = 0;
                let total = shape[axis] * inner;
                for id in inputs {
                    let s = self.shape(id).to_vec();
                    let chunk = s[axis] * inner;
                    if self.wants(id) {
                        let mut g = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * total + offset;
                            g.extend_from_slice(&up.data()[base..base + chunk]);
                        }
                        self.accumulate(id, Tensor::new(s, g)?);
                    }
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                let shape = self.shape(input).to_vec();
                let (outer, len, inner) = axis_split(&shape, axis);
                let width = out.shape()[axis] * inner;
                let mut g = vec![0.0; shape.iter().product()];
                for o in 0..outer {
                    let base = (o * len + start) * inner;
                    g[base..base + width].copy_from_slice(&up.data()[o * width..(o + 1) * width]);
                }
                self.accumulate(input, Tensor::new(shape, g)?);
            }
            Op::Sum(a) | Op::Mean(a) => {
                let n = self.value(a).numel();
                let scale = if matches!(op, Op::Mean(_)) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                let g = Tensor::full(self.shape(a), up.item() * scale);
                self.accumulate(a, g);
            }
            Op::SumAxis { input, axis } | Op::MeanAxis { input, axis } => {
                let shape = self.shape(input).to_vec();
                let (outer, len, inner) = axis_split(&shape, axis);
                let scale = if matches!(op, Op::MeanAxis { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut g = vec![0.0; shape.iter().product()];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            g[(o * len + k) * inner + i] = up.data()[o * inner + i] * scale;
                        }
                    }
                }
                self.accumulate(input, Tensor::new(shape, g)?);
            }
            Op::Gather { input, indices } => {
                let shape = self.shape(input).to_vec();
                let mut g = vec![0.0; shape.iter().product()];
                for (&i, u) in indices.iter().zip(up.data()) {
                    g[i] += u;
                }
                self.accumulate(input, Tensor::new(shape, g)?);
            }
            Op::Embedding { table, ids } => {
                let shape = self.shape(table).to_vec();
                let e = shape[1];
                let mut g = vec![0.0; shape.iter().product()];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..e {
                        g[id * e + c] += up.data()[r * e + c];
                    }
                }
                self.accumulate(table, Tensor::new(shape, g)?);
            }
            Op::Reshape(a) => {
                let g = up.clone().reshaped(self.shape(a).to_vec())?;
                self.accumulate(a, g);
            }
            Op::GradReverse { input, alpha } => {
                let g = up.map(|g| -alpha * g);
                self.accumulate(input, g);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log-sum-exp (shift by the maximum).
pub fn logsumexp_slice(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let s: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(d, _)| d != axis)
        .map(|(_, &n)| n)
        .collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map shapes agree")
}

/// Sums `up` into a buffer of length `m` (the broadcast operand's size).
fn fold_leading(up: &Tensor, m: usize, sign: f64) -> Vec<f64> {
    if m == up.numel() {
        return up.data().iter().map(|g| sign * g).collect();
    }
    let mut acc = vec![0.0; m];
    for (i, g) in up.data().iter().enumerate() {
        acc[i % m] += sign * g;
    }
    acc
}

/// `[n,k] x [k,m]`; every output element sums over `k` in increasing order.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `up [n,m] x b[k,m]^T -> [n,k]`.
fn matmul_bt(up: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let urow = &up[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            out[i * k + p] = urow.iter().zip(brow).map(|(u, v)| u * v).sum();
        }
    }
    out
}

/// `a[n,k]^T x up[n,m] -> [k,m]`.
fn matmul_at(a: &[f64], up: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let urow = &up[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, u) in orow.iter_mut().zip(urow) {
                *o += av * u;
            }
        }
    }
    out
}
