//! Define-by-run reverse-mode differentiation tape.
//!
//! Every forward pass records primitive applications onto a fresh [`Tape`];
//! [`Tape::backward`] then walks the record in reverse to accumulate
//! gradients for every node reachable from a scalar loss. Values are f32
//! throughout; the tape keeps each node's forward value so backward never
//! recomputes activations.

use crate::diffcore::tensor::Tensor;
use crate::{Error, Result};

pub type NodeId = usize;

const GELU_C0: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_C1: f32 = 0.044715;

/// Primitive operations recordable on the tape.
///
/// Attribute-carrying variants keep everything needed for replay; inputs are
/// always tape nodes, never attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Leaf node holding an externally supplied value.
    Input,
    /// `[.., m, k] x [k, n]` or batched `[lead.., m, k] x [lead.., k, n]`.
    MatMul,
    /// Elementwise addition; rhs shape may be a suffix of lhs (broadcast over
    /// leading axes).
    Add,
    /// Elementwise subtraction, same shapes.
    Sub,
    /// Elementwise product with suffix broadcast on rhs.
    Mul,
    /// Elementwise quotient with suffix broadcast on rhs.
    Divide,
    Reshape(Vec<usize>),
    /// Swap two axes.
    Transpose(usize, usize),
    /// Concatenate along the last axis; leading dims must agree.
    ConcatLastAxis,
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    Relu,
    /// tanh-approximated GELU.
    Gelu,
    Tanh,
    SoftmaxLastAxis,
    /// Inputs: x, gamma, beta. Normalizes the last axis.
    LayerNorm { eps: f32 },
    /// Mean of all elements, scalar output.
    Mean,
    /// Sum of all elements, scalar output.
    Sum,
    /// Max over the last axis; ties resolve to the first occurrence.
    MaxLastAxis,
    /// Row gather from a `[vocab, dim]` table.
    EmbeddingLookup(Vec<u32>),
    /// Mean over the batch of `-log softmax(logits)[label]`, log-sum-exp
    /// stabilized. Input: logits `[batch, classes]`.
    CrossEntropy { labels: Vec<u32> },
    /// Inputs: x `[b, cin, h, w]`, w `[cout, cin, kh, kw]`, bias `[cout]`.
    Conv2d { stride: usize, pad: usize },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Input => "input",
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Divide => "divide",
            Primitive::Reshape(_) => "reshape",
            Primitive::Transpose(_, _) => "transpose",
            Primitive::ConcatLastAxis => "concat-last-axis",
            Primitive::Slice { .. } => "slice",
            Primitive::Relu => "relu",
            Primitive::Gelu => "gelu",
            Primitive::Tanh => "tanh",
            Primitive::SoftmaxLastAxis => "softmax-last-axis",
            Primitive::LayerNorm { .. } => "layernorm",
            Primitive::Mean => "mean",
            Primitive::Sum => "sum",
            Primitive::MaxLastAxis => "max-last-axis",
            Primitive::EmbeddingLookup(_) => "embedding-lookup",
            Primitive::CrossEntropy { .. } => "cross-entropy",
            Primitive::Conv2d { .. } => "conv2d",
        }
    }
}

struct Node {
    op: Primitive,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Gradients produced by one backward pass; nodes unreachable from the loss
/// report zero.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `id`, materializing zeros for unreachable nodes.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id]),
        }
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id].as_ref()
    }
}

/// Ordered record of primitive applications for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf holding `value`.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Primitive::Input,
            inputs: vec![],
            value,
        });
        self.nodes.len() - 1
    }

    /// Alias of [`Tape::input`] for values that are not differentiated.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.input(value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn op(&self, id: NodeId) -> &Primitive {
        &self.nodes[id].op
    }

    pub fn inputs_of(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id].inputs
    }

    /// Apply a primitive to recorded nodes, validating shapes, and record
    /// the result.
    pub fn apply(&mut self, op: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        if matches!(op, Primitive::Input) {
            return Err(Error::primitive("input", "leaves are created via input()"));
        }
        for &id in inputs {
            if id >= self.nodes.len() {
                return Err(Error::primitive(op.name(), format!("unknown node id {id}")));
            }
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
        let value = eval_forward(&op, &vals)?;
        debug_assert!(
            value.all_finite(),
            "{} produced non-finite values",
            op.name()
        );
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
        });
        Ok(self.nodes.len() - 1)
    }

    // Convenience wrappers.

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn divide(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Divide, &[a, b])
    }

    /// Multiply by a scalar constant.
    pub fn scale(&mut self, a: NodeId, c: f32) -> Result<NodeId> {
        let k = self.constant(Tensor::scalar(c));
        self.mul(a, k)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[a])
    }

    pub fn transpose(&mut self, a: NodeId, ax0: usize, ax1: usize) -> Result<NodeId> {
        self.apply(Primitive::Transpose(ax0, ax1), &[a])
    }

    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(Primitive::ConcatLastAxis, parts)
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.apply(Primitive::Slice { axis, start, len }, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Gelu, &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Tanh, &[a])
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::SoftmaxLastAxis, &[a])
    }

    pub fn layernorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f32,
    ) -> Result<NodeId> {
        self.apply(Primitive::LayerNorm { eps }, &[x, gamma, beta])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mean, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn max_last(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MaxLastAxis, &[a])
    }

    pub fn embedding(&mut self, table: NodeId, indices: Vec<u32>) -> Result<NodeId> {
        self.apply(Primitive::EmbeddingLookup(indices), &[table])
    }

    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[u32]) -> Result<NodeId> {
        self.apply(
            Primitive::CrossEntropy {
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        self.apply(Primitive::Conv2d { stride, pad }, &[x, w, b])
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Reverse accumulation from a scalar root. Gradients are reported for
    /// every node; nodes the root does not depend on get zeros.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if root >= self.nodes.len() {
            return Err(Error::primitive("backward", format!("unknown node id {root}")));
        }
        let root_shape = self.nodes[root].value.shape();
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: root_shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::ones(root_shape));
        for id in (0..=root).rev() {
            let Some(out_grad) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !matches!(node.op, Primitive::Input) {
                let in_vals: Vec<&Tensor> =
                    node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
                let in_grads = backward_op(&node.op, &in_vals, &node.value, &out_grad)?;
                for (&input_id, g) in node.inputs.iter().zip(in_grads) {
                    match &mut grads[input_id] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            grads[id] = Some(out_grad);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    /// Re-run the recorded program, optionally overriding leaf values.
    /// With no overrides the result is bit-identical to the recorded values.
    pub fn replay(&self, overrides: &[(NodeId, Tensor)]) -> Result<Vec<Tensor>> {
        for (id, t) in overrides {
            if *id >= self.nodes.len() || !matches!(self.nodes[*id].op, Primitive::Input) {
                return Err(Error::primitive("replay", format!("node {id} is not a leaf")));
            }
            if t.shape() != self.nodes[*id].value.shape() {
                return Err(Error::shape("replay", self.nodes[*id].value.shape(), t.shape()));
            }
        }
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let v = if matches!(node.op, Primitive::Input) {
                overrides
                    .iter()
                    .find(|(oid, _)| *oid == id)
                    .map(|(_, t)| t.clone())
                    .unwrap_or_else(|| node.value.clone())
            } else {
                let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| &values[i]).collect();
                eval_forward(&node.op, &ins)?
            };
            values.push(v);
        }
        Ok(values)
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Zero-pad `images` (a stack of `count` h×w planes) by `pad` on each side.
fn pad_images(data: &[f32], count: usize, h: usize, w: usize, pad: usize) -> Vec<f32> {
    if pad == 0 {
        return data.to_vec();
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0f32; count * hp * wp];
    for img in 0..count {
        for i in 0..h {
            let src = (img * h + i) * w;
            let dst = (img * hp + i + pad) * wp + pad;
            out[dst..dst + w].copy_from_slice(&data[src..src + w]);
        }
    }
    out
}

/// rhs broadcasts over lhs when its shape is a trailing suffix of lhs's.
fn suffix_broadcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

/// Fold a gradient of lhs shape down to rhs (suffix) shape by summing tiles.
fn fold_to_suffix(grad: &[f32], rhs_numel: usize, rhs_shape: &[usize]) -> Tensor {
    let mut out = vec![0.0f32; rhs_numel];
    for (i, &g) in grad.iter().enumerate() {
        out[i % rhs_numel] += g;
    }
    Tensor::new(rhs_shape.to_vec(), out).expect("fold shape")
}

fn mm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

enum MatMulCase {
    /// lhs `[lead.., m, k]`, rhs `[k, n]`: lhs rows flattened.
    RhsShared { rows: usize, k: usize, n: usize },
    /// Equal leading dims on both sides.
    Batched {
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
}

fn matmul_case(a: &[usize], b: &[usize]) -> Result<(MatMulCase, Vec<usize>)> {
    if a.len() >= 2 && b.len() == 2 && a[a.len() - 1] == b[0] {
        let k = b[0];
        let n = b[1];
        let rows: usize = a[..a.len() - 1].iter().product();
        let mut out = a[..a.len() - 1].to_vec();
        out.push(n);
        return Ok((MatMulCase::RhsShared { rows, k, n }, out));
    }
    if a.len() == b.len() && a.len() > 2 && a[..a.len() - 2] == b[..b.len() - 2] {
        let m = a[a.len() - 2];
        let k = a[a.len() - 1];
        if k == b[b.len() - 2] {
            let n = b[b.len() - 1];
            let batch: usize = a[..a.len() - 2].iter().product();
            let mut out = a[..a.len() - 2].to_vec();
            out.push(m);
            out.push(n);
            return Ok((MatMulCase::Batched { batch, m, k, n }, out));
        }
    }
    Err(Error::shape("matmul", a, b))
}

fn eval_forward(op: &Primitive, ins: &[&Tensor]) -> Result<Tensor> {
    let arity_err = |n: usize| {
        Err(Error::primitive(
            op.name(),
            format!("expected {n} inputs, got {}", ins.len()),
        ))
    };
    match op {
        Primitive::Input => unreachable!("leaves are not evaluated"),
        Primitive::MatMul => {
            if ins.len() != 2 {
                return arity_err(2);
            }
            let (a, b) = (ins[0], ins[1]);
            let (case, out_shape) = matmul_case(a.shape(), b.shape())?;
            let mut out = vec![0.0f32; out_shape.iter().product()];
            match case {
                MatMulCase::RhsShared { rows, k, n } => {
                    mm(a.data(), b.data(), rows, k, n, &mut out)
                }
                MatMulCase::Batched { batch, m, k, n } => {
                    for bi in 0..batch {
                        mm(
                            &a.data()[bi * m * k..(bi + 1) * m * k],
                            &b.data()[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                            &mut out[bi * m * n..(bi + 1) * m * n],
                        );
                    }
                }
            }
            Tensor::new(out_shape, out)
        }
        Primitive::Add | Primitive::Mul | Primitive::Divide => {
            if ins.len() != 2 {
                return arity_err(2);
            }
            let (l, r) = (ins[0], ins[1]);
            if !suffix_broadcast_ok(l.shape(), r.shape()) {
                return Err(Error::shape(op.name(), l.shape(), r.shape()));
            }
            let rn = r.numel().max(1);
            let data: Vec<f32> = l
                .data()
                .iter()
                .enumerate()
                .map(|(i, &lv)| {
                    let rv = r.data()[i % rn];
                    match op {
                        Primitive::Add => lv + rv,
                        Primitive::Mul => lv * rv,
                        _ => lv / rv,
                    }
                })
                .collect();
            Tensor::new(l.shape().to_vec(), data)
        }
        Primitive::Sub => {
            if ins.len() != 2 {
                return arity_err(2);
            }
            let (l, r) = (ins[0], ins[1]);
            if l.shape() != r.shape() {
                return Err(Error::shape("sub", l.shape(), r.shape()));
            }
            let data = l
                .data()
                .iter()
                .zip(r.data())
                .map(|(a, b)| a - b)
                .collect();
            Tensor::new(l.shape().to_vec(), data)
        }
        Primitive::Reshape(shape) => {
            if ins.len() != 1 {
                return arity_err(1);
            }
            let x = ins[0];
            if shape.iter().product::<usize>() != x.numel() {
                return Err(Error::shape("reshape", x.shape(), shape));
            }
            Tensor::new(shape.clone(), x.data().to_vec())
        }
        Primitive::Transpose(ax0, ax1) => {
            if ins.len() != 1 {
                return arity_err(1);
            }
            let x = ins[0];
            if *ax0 >= x.rank() || *ax1 >= x.rank() {
                return Err(Error::primitive(
                    "transpose",
                    format!("axes ({ax0},{ax1}) out of range for rank {}", x.rank()),
                ));
            }
            Ok(transpose_tensor(x, *ax0, *ax1))
        }
        Primitive::ConcatLastAxis => {
            if ins.is_empty() {
                return Err(Error::primitive("concat-last-axis", "needs at least one input"));
            }
            let lead = &ins[0].shape()[..ins[0].rank().saturating_sub(1)];
            for t in ins {
                if t.rank() == 0 || t.rank() != lead.len() + 1 || &t.shape()[..lead.len()] != lead {
                    return Err(Error::shape("concat-last-axis", ins[0].shape(), t.shape()));
                }
            }
            let rows: usize = lead.iter().product();
            let total_last: usize = ins.iter().map(|t| *t.shape().last().unwrap()).sum();
            let mut out = Vec::with_capacity(rows * total_last);
            for r in 0..rows {
                for t in ins {
                    let last = *t.shape().last().unwrap();
                    out.extend_from_slice(&t.data()[r * last..(r + 1) * last]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total_last);
            Tensor::new(shape, out)
        }
        Primitive::Slice { axis, start, len } => {
            if ins.len() != 1 {
                return arity_err(1);
            }
            let x = ins[0];
            if *axis >= x.rank() || *len == 0 || start + len > x.shape()[*axis] {
                return Err(Error::primitive(
                    "slice",
                    format!(
                        "range [{start}, {}) invalid for axis {axis} of shape {:?}",
                        start + len,
                        x.shape()
                    ),
                ));
            }
            let dim = x.shape()[*axis];
            let inner: usize = x.shape()[axis + 1..].iter().product();
            let outer: usize = x.shape()[..*axis].iter().product();
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * dim + start) * inner;
                out.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = *len;
            Tensor::new(shape, out)
        }
        Primitive::Relu => {
            if ins.len() != 1 {
                return arity_err(1);
            }
            Ok(ins[0].map(|v| if v > 0.0 { v } else { 0.0 }))
        }
        Primitive::Gelu => {
            if ins.len() != 1 {
                return arity_err(1);
            }
            Ok(ins[0].map(|x| {
                let u = GELU_C0 * (x + GELU_C1 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }))
        }
        Primitive::Tanh => {
            if ins.len() != 1 {
                return arity_err(1);
            }
            Ok(ins[0].map(f32::tanh))
        }
        Primitive::SoftmaxLastAxis => {
            if ins.len() != 1 {
                return arity_err(1);
            }
            let x = ins[0];
            if x.rank() == 0 {
                return Err(Error::primitive("softmax-last-axis", "needs rank >= 1"));
            }
            let n = *x.shape().last().unwrap();
            let mut out = Vec::with_capacity(x.numel());
            for row in x.data().chunks_exact(n) {
                let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let exps: Vec<f32> = row.iter().map(|v| (v - m).exp()).collect();
                let s: f32 = exps.iter().sum();
                out.extend(exps.iter().map(|e| e / s));
            }
            Tensor::new(x.shape().to_vec(), out)
        }
        Primitive::LayerNorm { eps } => {
            if ins.len() != 3 {
                return arity_err(3);
            }
            let (x, gamma, beta) = (ins[0], ins[1], ins[2]);
            if x.rank() == 0 {
                return Err(Error::primitive("layernorm", "needs rank >= 1"));
            }
            let n = *x.shape().last().unwrap();
            if gamma.shape() != [n] {
                return Err(Error::shape("layernorm", &[n], gamma.shape()));
            }
            if beta.shape() != [n] {
                return Err(Error::shape("layernorm", &[n], beta.shape()));
            }
            let mut out = Vec::with_capacity(x.numel());
            for row in x.data().chunks_exact(n) {
                let mean = row.iter().sum::<f32>() / n as f32;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
                let inv = 1.0 / (var + eps).sqrt();
                for (i, &v) in row.iter().enumerate() {
                    out.push(gamma.data()[i] * (v - mean) * inv + beta.data()[i]);
                }
            }
            Tensor::new(x.shape().to_vec(), out)
        }
        Primitive::Mean => {
            if ins.len() != 1 {
                return arity_err(1);
            }
            let x = ins[0];
            if x.numel() == 0 {
                return Err(Error::primitive("mean", "empty tensor"));
            }
            Ok(Tensor::scalar(
                x.data().iter().sum::<f32>() / x.numel() as f32,
            ))
        }
        Primitive::Sum => {
            if ins.len() != 1 {
                return arity_err(1);
            }
            Ok(Tensor::scalar(ins[0].data().iter().sum::<f32>()))
        }
        Primitive::MaxLastAxis => {
            if ins.len() != 1 {
                return arity_err(1);
            }
            let x = ins[0];
            if x.rank() == 0 {
                return Err(Error::primitive("max-last-axis", "needs rank >= 1"));
            }
            let n = *x.shape().last().unwrap();
            let out: Vec<f32> = x
                .data()
                .chunks_exact(n)
                .map(|row| row.iter().cloned().fold(f32::NEG_INFINITY, f32::max))
                .collect();
            Tensor::new(x.shape()[..x.rank() - 1].to_vec(), out)
        }
        Primitive::EmbeddingLookup(indices) => {
            if ins.len() != 1 {
                return arity_err(1);
            }
            let table = ins[0];
            if table.rank() != 2 {
                return Err(Error::primitive("embedding-lookup", "table must be rank 2"));
            }
            let (v, d) = (table.shape()[0], table.shape()[1]);
            let mut out = Vec::with_capacity(indices.len() * d);
            for &i in indices {
                if i as usize >= v {
                    return Err(Error::primitive(
                        "embedding-lookup",
                        format!("index {i} out of range for table of {v} rows"),
                    ));
                }
                out.extend_from_slice(&table.data()[i as usize * d..(i as usize + 1) * d]);
            }
            Tensor::new(vec![indices.len(), d], out)
        }
        Primitive::CrossEntropy { labels } => {
            if ins.len() != 1 {
                return arity_err(1);
            }
            let logits = ins[0];
            if logits.rank() != 2 {
                return Err(Error::primitive("cross-entropy", "logits must be rank 2"));
            }
            let (b, c) = (logits.shape()[0], logits.shape()[1]);
            if labels.len() != b {
                return Err(Error::primitive(
                    "cross-entropy",
                    format!("{} labels for batch of {b}", labels.len()),
                ));
            }
            let mut total = 0.0f32;
            for (row, &label) in logits.data().chunks_exact(c).zip(labels.iter()) {
                if label as usize >= c {
                    return Err(Error::LabelOutOfRange { label, classes: c });
                }
                let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f32>().ln();
                total += lse - row[label as usize];
            }
            Ok(Tensor::scalar(total / b as f32))
        }
        Primitive::Conv2d { stride, pad } => {
            if ins.len() != 3 {
                return arity_err(3);
            }
            let (x, w, bias) = (ins[0], ins[1], ins[2]);
            if x.rank() != 4 || w.rank() != 4 {
                return Err(Error::shape("conv2d", x.shape(), w.shape()));
            }
            let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (cout, wcin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
            if wcin != cin {
                return Err(Error::shape("conv2d", x.shape(), w.shape()));
            }
            if bias.shape() != [cout] {
                return Err(Error::shape("conv2d", &[cout], bias.shape()));
            }
            if *stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
                return Err(Error::primitive("conv2d", "kernel larger than padded input"));
            }
            let oh = (h + 2 * pad - kh) / stride + 1;
            let ow = (wd + 2 * pad - kw) / stride + 1;
            let padded = pad_images(x.data(), b * cin, h, wd, *pad);
            let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
            let mut out = vec![0.0f32; b * cout * oh * ow];
            for bi in 0..b {
                for co in 0..cout {
                    let obase = (bi * cout + co) * oh * ow;
                    out[obase..obase + oh * ow].fill(bias.data()[co]);
                    for ci in 0..cin {
                        let pbase = (bi * cin + ci) * hp * wp;
                        for u in 0..kh {
                            for v in 0..kw {
                                let wv = w.data()[((co * cin + ci) * kh + u) * kw + v];
                                if wv == 0.0 {
                                    continue;
                                }
                                for oi in 0..oh {
                                    let prow = &padded[pbase + (oi * stride + u) * wp + v..];
                                    let orow = &mut out[obase + oi * ow..obase + (oi + 1) * ow];
                                    if *stride == 1 {
                                        for (o, &p) in orow.iter_mut().zip(&prow[..ow]) {
                                            *o += wv * p;
                                        }
                                    } else {
                                        for (oj, o) in orow.iter_mut().enumerate() {
                                            *o += wv * prow[oj * stride];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Tensor::new(vec![b, cout, oh, ow], out)
        }
    }
}

fn transpose_tensor(x: &Tensor, ax0: usize, ax1: usize) -> Tensor {
    if ax0 == ax1 {
        return x.clone();
    }
    let mut out_shape = x.shape().to_vec();
    out_shape.swap(ax0, ax1);
    let out_strides = strides(&out_shape);
    let rank = x.rank();
    let mut out = vec![0.0f32; x.numel()];
    let mut idx = vec![0usize; rank];
    for &v in x.data() {
        let mut off = 0;
        for d in 0..rank {
            let od = if d == ax0 {
                ax1
            } else if d == ax1 {
                ax0
            } else {
                d
            };
            off += idx[d] * out_strides[od];
        }
        out[off] = v;
        // odometer increment over the input shape
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < x.shape()[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("transpose shape")
}

fn backward_op(
    op: &Primitive,
    ins: &[&Tensor],
    out: &Tensor,
    grad: &Tensor,
) -> Result<Vec<Tensor>> {
    match op {
        Primitive::Input => Ok(vec![]),
        Primitive::MatMul => {
            let (a, b) = (ins[0], ins[1]);
            let (case, _) = matmul_case(a.shape(), b.shape())?;
            match case {
                MatMulCase::RhsShared { rows, k, n } => {
                    // dA = dC B^T ; dB = A^T dC
                    let bt = transpose_tensor(b, 0, 1);
                    let mut da = vec![0.0f32; rows * k];
                    mm(grad.data(), bt.data(), rows, n, k, &mut da);
                    let a2 = Tensor::new(vec![rows, k], a.data().to_vec())?;
                    let at = transpose_tensor(&a2, 0, 1);
                    let mut db = vec![0.0f32; k * n];
                    mm(at.data(), grad.data(), k, rows, n, &mut db);
                    Ok(vec![
                        Tensor::new(a.shape().to_vec(), da)?,
                        Tensor::new(b.shape().to_vec(), db)?,
                    ])
                }
                MatMulCase::Batched { batch, m, k, n } => {
                    let mut da = vec![0.0f32; batch * m * k];
                    let mut db = vec![0.0f32; batch * k * n];
                    for bi in 0..batch {
                        let asl = &a.data()[bi * m * k..(bi + 1) * m * k];
                        let bsl = &b.data()[bi * k * n..(bi + 1) * k * n];
                        let gsl = &grad.data()[bi * m * n..(bi + 1) * m * n];
                        let b2 = Tensor::new(vec![k, n], bsl.to_vec())?;
                        let bt = transpose_tensor(&b2, 0, 1);
                        mm(gsl, bt.data(), m, n, k, &mut da[bi * m * k..(bi + 1) * m * k]);
                        let a2 = Tensor::new(vec![m, k], asl.to_vec())?;
                        let at = transpose_tensor(&a2, 0, 1);
                        mm(at.data(), gsl, k, m, n, &mut db[bi * k * n..(bi + 1) * k * n]);
                    }
                    Ok(vec![
                        Tensor::new(a.shape().to_vec(), da)?,
                        Tensor::new(b.shape().to_vec(), db)?,
                    ])
                }
            }
        }
        Primitive::Add => {
            let (l, r) = (ins[0], ins[1]);
            let dl = grad.clone();
            let dr = fold_to_suffix(grad.data(), r.numel().max(1), r.shape());
            let _ = l;
            Ok(vec![dl, dr])
        }
        Primitive::Sub => Ok(vec![grad.clone(), grad.map(|g| -g)]),
        Primitive::Mul => {
            let (l, r) = (ins[0], ins[1]);
            let rn = r.numel().max(1);
            let dl: Vec<f32> = grad
                .data()
                .iter()
                .enumerate()
                .map(|(i, &g)| g * r.data()[i % rn])
                .collect();
            let gl: Vec<f32> = grad
                .data()
                .iter()
                .zip(l.data())
                .map(|(&g, &lv)| g * lv)
                .collect();
            Ok(vec![
                Tensor::new(l.shape().to_vec(), dl)?,
                fold_to_suffix(&gl, rn, r.shape()),
            ])
        }
        Primitive::Divide => {
            let (l, r) = (ins[0], ins[1]);
            let rn = r.numel().max(1);
            let dl: Vec<f32> = grad
                .data()
                .iter()
                .enumerate()
                .map(|(i, &g)| g / r.data()[i % rn])
                .collect();
            let gr: Vec<f32> = grad
                .data()
                .iter()
                .enumerate()
                .map(|(i, &g)| {
                    let rv = r.data()[i % rn];
                    -g * l.data()[i] / (rv * rv)
                })
                .collect();
            Ok(vec![
                Tensor::new(l.shape().to_vec(), dl)?,
                fold_to_suffix(&gr, rn, r.shape()),
            ])
        }
        Primitive::Reshape(_) => Ok(vec![Tensor::new(
            ins[0].shape().to_vec(),
            grad.data().to_vec(),
        )?]),
        Primitive::Transpose(ax0, ax1) => Ok(vec![transpose_tensor(grad, *ax0, *ax1)]),
        Primitive::ConcatLastAxis => {
            let lead_rows: usize = ins[0].shape()[..ins[0].rank() - 1].iter().product();
            let total_last = *grad.shape().last().unwrap();
            let mut grads = Vec::with_capacity(ins.len());
            let mut offset = 0;
            for t in ins {
                let last = *t.shape().last().unwrap();
                let mut g = Vec::with_capacity(t.numel());
                for r in 0..lead_rows {
                    let base = r * total_last + offset;
                    g.extend_from_slice(&grad.data()[base..base + last]);
                }
                grads.push(Tensor::new(t.shape().to_vec(), g)?);
                offset += last;
            }
            Ok(grads)
        }
        Primitive::Slice { axis, start, len } => {
            let x = ins[0];
            let dim = x.shape()[*axis];
            let inner: usize = x.shape()[axis + 1..].iter().product();
            let outer: usize = x.shape()[..*axis].iter().product();
            let mut g = vec![0.0f32; x.numel()];
            for o in 0..outer {
                let dst = (o * dim + start) * inner;
                let src = o * len * inner;
                g[dst..dst + len * inner].copy_from_slice(&grad.data()[src..src + len * inner]);
            }
            Ok(vec![Tensor::new(x.shape().to_vec(), g)?])
        }
        Primitive::Relu => {
            let x = ins[0];
            let g = grad
                .data()
                .iter()
                .zip(x.data())
                .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                .collect();
            Ok(vec![Tensor::new(x.shape().to_vec(), g)?])
        }
        Primitive::Gelu => {
            let x = ins[0];
            let g = grad
                .data()
                .iter()
                .zip(x.data())
                .map(|(&g, &v)| {
                    let u = GELU_C0 * (v + GELU_C1 * v * v * v);
                    let t = u.tanh();
                    let du = GELU_C0 * (1.0 + 3.0 * GELU_C1 * v * v);
                    g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                })
                .collect();
            Ok(vec![Tensor::new(x.shape().to_vec(), g)?])
        }
        Primitive::Tanh => {
            let g = grad
                .data()
                .iter()
                .zip(out.data())
                .map(|(&g, &y)| g * (1.0 - y * y))
                .collect();
            Ok(vec![Tensor::new(ins[0].shape().to_vec(), g)?])
        }
        Primitive::SoftmaxLastAxis => {
            let n = *out.shape().last().unwrap();
            let mut g = Vec::with_capacity(out.numel());
            for (yrow, grow) in out.data().chunks_exact(n).zip(grad.data().chunks_exact(n)) {
                let dot: f32 = yrow.iter().zip(grow).map(|(y, gq)| y * gq).sum();
                g.extend(yrow.iter().zip(grow).map(|(y, gq)| y * (gq - dot)));
            }
            Ok(vec![Tensor::new(out.shape().to_vec(), g)?])
        }
        Primitive::LayerNorm { eps } => {
            let (x, gamma, _) = (ins[0], ins[1], ins[2]);
            let n = *x.shape().last().unwrap();
            let rows = x.numel() / n;
            let mut dx = Vec::with_capacity(x.numel());
            let mut dgamma = vec![0.0f32; n];
            let mut dbeta = vec![0.0f32; n];
            for r in 0..rows {
                let xr = &x.data()[r * n..(r + 1) * n];
                let gr = &grad.data()[r * n..(r + 1) * n];
                let mean = xr.iter().sum::<f32>() / n as f32;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f32> = xr.iter().map(|v| (v - mean) * inv).collect();
                let dxhat: Vec<f32> = gr
                    .iter()
                    .zip(gamma.data())
                    .map(|(&g, &gm)| g * gm)
                    .collect();
                let m1 = dxhat.iter().sum::<f32>() / n as f32;
                let m2 = dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f32>() / n as f32;
                for i in 0..n {
                    dx.push(inv * (dxhat[i] - m1 - xhat[i] * m2));
                    dgamma[i] += gr[i] * xhat[i];
                    dbeta[i] += gr[i];
                }
            }
            Ok(vec![
                Tensor::new(x.shape().to_vec(), dx)?,
                Tensor::from_vec(dgamma),
                Tensor::from_vec(dbeta),
            ])
        }
        Primitive::Mean => {
            let x = ins[0];
            let g = grad.item() / x.numel() as f32;
            Ok(vec![Tensor::full(x.shape(), g)])
        }
        Primitive::Sum => Ok(vec![Tensor::full(ins[0].shape(), grad.item())]),
        Primitive::MaxLastAxis => {
            let x = ins[0];
            let n = *x.shape().last().unwrap();
            let mut g = vec![0.0f32; x.numel()];
            for (r, row) in x.data().chunks_exact(n).enumerate() {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                g[r * n + best] = grad.data()[r];
            }
            Ok(vec![Tensor::new(x.shape().to_vec(), g)?])
        }
        Primitive::EmbeddingLookup(indices) => {
            let table = ins[0];
            let d = table.shape()[1];
            let mut g = vec![0.0f32; table.numel()];
            for (r, &i) in indices.iter().enumerate() {
                for j in 0..d {
                    g[i as usize * d + j] += grad.data()[r * d + j];
                }
            }
            Ok(vec![Tensor::new(table.shape().to_vec(), g)?])
        }
        Primitive::CrossEntropy { labels } => {
            let logits = ins[0];
            let (b, c) = (logits.shape()[0], logits.shape()[1]);
            let scale = grad.item() / b as f32;
            let mut g = Vec::with_capacity(logits.numel());
            for (row, &label) in logits.data().chunks_exact(c).zip(labels.iter()) {
                let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let exps: Vec<f32> = row.iter().map(|v| (v - m).exp()).collect();
                let s: f32 = exps.iter().sum();
                for (i, e) in exps.iter().enumerate() {
                    let soft = e / s;
                    let onehot = if i == label as usize { 1.0 } else { 0.0 };
                    g.push(scale * (soft - onehot));
                }
            }
            Ok(vec![Tensor::new(logits.shape().to_vec(), g)?])
        }
        Primitive::Conv2d { stride, pad } => {
            let (x, w, _bias) = (ins[0], ins[1], ins[2]);
            let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
            let (oh, ow) = (out.shape()[2], out.shape()[3]);
            let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
            let padded = pad_images(x.data(), b * cin, h, wd, *pad);
            let mut dpadded = vec![0.0f32; padded.len()];
            let mut dw = vec![0.0f32; w.numel()];
            let mut db = vec![0.0f32; cout];
            for bi in 0..b {
                for co in 0..cout {
                    let gbase = (bi * cout + co) * oh * ow;
                    for g in &grad.data()[gbase..gbase + oh * ow] {
                        db[co] += g;
                    }
                    for ci in 0..cin {
                        let pbase = (bi * cin + ci) * hp * wp;
                        for u in 0..kh {
                            for v in 0..kw {
                                let wi = ((co * cin + ci) * kh + u) * kw + v;
                                let wv = w.data()[wi];
                                let mut wacc = 0.0f32;
                                for oi in 0..oh {
                                    let grow = &grad.data()[gbase + oi * ow..gbase + (oi + 1) * ow];
                                    let poff = pbase + (oi * stride + u) * wp + v;
                                    if *stride == 1 {
                                        let prow = &padded[poff..poff + ow];
                                        let drow = &mut dpadded[poff..poff + ow];
                                        for ((dp, &p), &g) in
                                            drow.iter_mut().zip(prow).zip(grow)
                                        {
                                            *dp += wv * g;
                                            wacc += p * g;
                                        }
                                    } else {
                                        for (oj, &g) in grow.iter().enumerate() {
                                            dpadded[poff + oj * stride] += wv * g;
                                            wacc += padded[poff + oj * stride] * g;
                                        }
                                    }
                                }
                                dw[wi] += wacc;
                            }
                        }
                    }
                }
            }
            // Crop padding off the input gradient.
            let mut dx = vec![0.0f32; x.numel()];
            for img in 0..b * cin {
                for i in 0..h {
                    let src = (img * hp + i + pad) * wp + pad;
                    let dst = (img * h + i) * wd;
                    dx[dst..dst + wd].copy_from_slice(&dpadded[src..src + wd]);
                }
            }
            Ok(vec![
                Tensor::new(x.shape().to_vec(), dx)?,
                Tensor::new(w.shape().to_vec(), dw)?,
                Tensor::from_vec(db),
            ])
        }
    }
}
