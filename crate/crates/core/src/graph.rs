//! Reverse-mode automatic differentiation over an eager op tape.
//!
//! A [`Graph`] records every op as it is evaluated; [`Graph::backward`] walks
//! the tape in reverse and accumulates vector-Jacobian products. The op set is
//! exactly what the denoiser and regression backbones need: broadcast
//! elementwise arithmetic, 2-D matmul, slicing/concat for attention heads,
//! smooth activations, and fused softmax / layer-norm primitives with
//! hand-derived VJPs.
//!
//! Every op output is checked for NaN/Inf and rejected with an error naming
//! the offending node, so a non-finite value can never propagate silently.

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Constant,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    AddScalar,
    MatMul,
    Transpose,
    Reshape,
    Narrow { axis: usize, start: usize, len: usize },
    Concat { axis: usize },
    Relu,
    Silu,
    Tanh,
    SoftmaxLast,
    LayerNormLast { eps: f64 },
    SumAll,
    MeanAll,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::Relu => "relu",
            Op::Silu => "silu",
            Op::Tanh => "tanh",
            Op::SoftmaxLast => "softmax",
            Op::LayerNormLast { .. } => "layer_norm",
            Op::SumAll => "sum_all",
            Op::MeanAll => "mean_all",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    tracked: bool,
}

/// Gradients per node produced by [`Graph::backward`]. Nodes off every path
/// to the loss have no entry; [`Gradients::wrt_or_zeros`] fills in zeros.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn wrt_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match &self.grads[id.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

/// Eager autodiff tape. Nodes are appended in evaluation order, which is a
/// valid topological order for the reverse pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value computed at `id`.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Tracked leaf: gradients flow back to it.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push_unchecked(Op::Input, vec![], t, true)
    }

    /// Untracked leaf: treated as a constant by the reverse pass.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push_unchecked(Op::Constant, vec![], t, false)
    }

    fn push_unchecked(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, tracked: bool) -> NodeId {
        self.nodes.push(Node { op, inputs, value, tracked });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: format!("{} (node {})", op.name(), self.nodes.len()),
            });
        }
        let tracked = inputs.iter().any(|id| self.nodes[id.0].tracked);
        Ok(self.push_unchecked(op, inputs, value, tracked))
    }

    fn binary_broadcast(&mut self, op: Op, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shape(va.shape(), vb.shape()).map_err(|_| {
            Error::shape(
                op.name(),
                format!("{:?} vs {:?} (node {})", va.shape(), vb.shape(), self.nodes.len()),
            )
        })?;
        let sa = broadcast_strides(va.shape(), &out_shape);
        let sb = broadcast_strides(vb.shape(), &out_shape);
        let mut out = vec![0.0; out_shape.iter().product()];
        let (da, db) = (va.data(), vb.data());
        for_each_broadcast(&out_shape, &sa, &sb, |lin, oa, ob| {
            out[lin] = f(da[oa], db[ob]);
        });
        self.push(op, vec![a, b], Tensor::new(out_shape, out)?)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_broadcast(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_broadcast(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_broadcast(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.map(|x| -x);
        self.push(Op::Neg, vec![a], v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.nodes[a.0].value.map(|x| c * x);
        self.push(Op::Scale(c), vec![a], v)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.nodes[a.0].value.map(|x| x + c);
        self.push(Op::AddScalar, vec![a], v)
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?} (node {})", va.shape(), vb.shape(), self.nodes.len()),
            ));
        }
        let value = matmul_raw(va, vb);
        self.push(Op::MatMul, vec![a, b], value)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        if va.rank() != 2 {
            return Err(Error::shape("transpose", format!("rank {} input", va.rank())));
        }
        let value = transpose_raw(va);
        self.push(Op::Transpose, vec![a], value)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.nodes[a.0].value.reshaped(shape)?;
        self.push(Op::Reshape, vec![a], v)
    }

    /// Slice of extent `len` starting at `start` along `axis`.
    pub fn narrow(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let shape = va.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {} [{}, {}) of {:?}", axis, start, start + len, shape),
            ));
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = vec![0.0; outer * len * inner];
        let src = va.data();
        for o in 0..outer {
            for j in 0..len {
                let s = (o * shape[axis] + start + j) * inner;
                let d = (o * len + j) * inner;
                out[d..d + inner].copy_from_slice(&src[s..s + inner]);
            }
        }
        self.push(Op::Narrow { axis, start, len }, vec![a], Tensor::new(out_shape, out)?)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat".into()));
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        let mut total = 0usize;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &e)| i != axis && e != first[i])
            {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", s, first)));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&first, axis);
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0usize;
        for p in parts {
            let v = &self.nodes[p.0].value;
            let e = v.shape()[axis];
            let src = v.data();
            for o in 0..outer {
                let s = o * e * inner;
                let d = (o * total + offset) * inner;
                out[d..d + e * inner].copy_from_slice(&src[s..s + e * inner]);
            }
            offset += e;
        }
        self.push(Op::Concat { axis }, parts.to_vec(), Tensor::new(out_shape, out)?)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.map(|x| x.max(0.0));
        self.push(Op::Relu, vec![a], v)
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.map(|x| x * sigmoid(x));
        self.push(Op::Silu, vec![a], v)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.map(f64::tanh);
        self.push(Op::Tanh, vec![a], v)
    }

    /// Row-wise softmax over the last axis (max-shifted for stability).
    pub fn softmax_last(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let n = *va.shape().last().ok_or_else(|| Error::shape("softmax", "rank-0 input"))?;
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), out)?;
        self.push(Op::SoftmaxLast, vec![a], value)
    }

    /// Row-wise layer norm over the last axis, pre-affine: `(x - mean) / sqrt(var + eps)`.
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let n = *va.shape().last().ok_or_else(|| Error::shape("layer_norm", "rank-0 input"))?;
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), out)?;
        self.push(Op::LayerNormLast { eps }, vec![a], value)
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Op::SumAll, vec![a], Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        let s: f64 = v.data().iter().sum();
        let n = v.numel() as f64;
        self.push(Op::MeanAll, vec![a], Tensor::scalar(s / n))
    }

    /// Mean over rows of a 2-D tensor, as a 1 x cols tensor.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let rows = self.nodes[a.0].value.shape()[0];
        let averager = self.constant(Tensor::full(&[1, rows], 1.0 / rows as f64));
        self.matmul(averager, a)
    }

    /// Mean squared error between two same-shape nodes, as a scalar node.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    /// Reverse pass from a scalar `loss` node. Returns per-node gradients;
    /// leaves not on any path to the loss are absent (see [`Gradients`]).
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NotScalar("loss node".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let keep_leaf = matches!(self.nodes[i].op, Op::Input);
            if !self.nodes[i].tracked {
                continue;
            }
            if self.nodes[i].inputs.is_empty() {
                if keep_leaf {
                    grads[i] = Some(g);
                }
                continue;
            }
            let input_grads = self.vjp(i, &g)?;
            let inputs = self.nodes[i].inputs.clone();
            for (inp, ig) in inputs.into_iter().zip(input_grads) {
                if !self.nodes[inp.0].tracked {
                    continue;
                }
                grads[inp.0] = Some(match grads[inp.0].take() {
                    Some(acc) => acc.add(&ig)?,
                    None => ig,
                });
            }
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian product of node `i` given upstream gradient `g`.
    fn vjp(&self, i: usize, g: &Tensor) -> Result<Vec<Tensor>> {
        let node = &self.nodes[i];
        let in_val = |j: usize| &self.nodes[node.inputs[j].0].value;
        let out = match &node.op {
            Op::Input | Op::Constant => vec![],
            Op::Add => {
                let (a, b) = (in_val(0).shape(), in_val(1).shape());
                vec![reduce_to_shape(g, a), reduce_to_shape(g, b)]
            }
            Op::Sub => {
                let (a, b) = (in_val(0).shape(), in_val(1).shape());
                vec![reduce_to_shape(g, a), reduce_to_shape(&g.scale(-1.0), b)]
            }
            Op::Mul => {
                let (va, vb) = (in_val(0), in_val(1));
                let out_shape = node.value.shape();
                let sa = broadcast_strides(va.shape(), out_shape);
                let sb = broadcast_strides(vb.shape(), out_shape);
                let mut da = vec![0.0; va.numel()];
                let mut db = vec![0.0; vb.numel()];
                let (pa, pb, pg) = (va.data(), vb.data(), g.data());
                for_each_broadcast(out_shape, &sa, &sb, |lin, oa, ob| {
                    da[oa] += pg[lin] * pb[ob];
                    db[ob] += pg[lin] * pa[oa];
                });
                vec![
                    Tensor::new(va.shape().to_vec(), da)?,
                    Tensor::new(vb.shape().to_vec(), db)?,
                ]
            }
            Op::Neg => vec![g.scale(-1.0)],
            Op::Scale(c) => vec![g.scale(*c)],
            Op::AddScalar => vec![g.clone()],
            Op::MatMul => {
                let (a, b) = (in_val(0), in_val(1));
                vec![
                    matmul_raw(g, &transpose_raw(b)),
                    matmul_raw(&transpose_raw(a), g),
                ]
            }
            Op::Transpose => vec![transpose_raw(g)],
            Op::Reshape => vec![g.reshaped(in_val(0).shape().to_vec())?],
            Op::Narrow { axis, start, len } => {
                let shape = in_val(0).shape().to_vec();
                let (outer, inner) = outer_inner(&shape, *axis);
                let mut da = vec![0.0; in_val(0).numel()];
                let gd = g.data();
                for o in 0..outer {
                    for j in 0..*len {
                        let d = (o * shape[*axis] + start + j) * inner;
                        let s = (o * len + j) * inner;
                        da[d..d + inner].copy_from_slice(&gd[s..s + inner]);
                    }
                }
                vec![Tensor::new(shape, da)?]
            }
            Op::Concat { axis } => {
                let total = node.value.shape()[*axis];
                let (outer, inner) = outer_inner(node.value.shape(), *axis);
                let gd = g.data();
                let mut parts = Vec::with_capacity(node.inputs.len());
                let mut offset = 0usize;
                for j in 0..node.inputs.len() {
                    let shape = in_val(j).shape().to_vec();
                    let e = shape[*axis];
                    let mut dp = vec![0.0; in_val(j).numel()];
                    for o in 0..outer {
                        let s = (o * total + offset) * inner;
                        let d = o * e * inner;
                        dp[d..d + e * inner].copy_from_slice(&gd[s..s + e * inner]);
                    }
                    parts.push(Tensor::new(shape, dp)?);
                    offset += e;
                }
                parts
            }
            Op::Relu => {
                let x = in_val(0);
                vec![g.zip(x, |gi, xi| if xi > 0.0 { gi } else { 0.0 })?]
            }
            Op::Silu => {
                let x = in_val(0);
                vec![g.zip(x, |gi, xi| {
                    let s = sigmoid(xi);
                    gi * s * (1.0 + xi * (1.0 - s))
                })?]
            }
            Op::Tanh => {
                let y = &node.value;
                vec![g.zip(y, |gi, yi| gi * (1.0 - yi * yi))?]
            }
            Op::SoftmaxLast => {
                let y = &node.value;
                let n = *y.shape().last().unwrap();
                let mut dx = vec![0.0; y.numel()];
                for (row, (yr, gr)) in y.data().chunks(n).zip(g.data().chunks(n)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(yi, gi)| yi * gi).sum();
                    for j in 0..n {
                        dx[row * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Tensor::new(y.shape().to_vec(), dx)?]
            }
            Op::LayerNormLast { eps } => {
                let x = in_val(0);
                let y = &node.value;
                let n = *y.shape().last().unwrap();
                let nf = n as f64;
                let mut dx = vec![0.0; y.numel()];
                for row in 0..y.numel() / n {
                    let xr = &x.data()[row * n..(row + 1) * n];
                    let yr = &y.data()[row * n..(row + 1) * n];
                    let gr = &g.data()[row * n..(row + 1) * n];
                    let mean = xr.iter().sum::<f64>() / nf;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let g_mean = gr.iter().sum::<f64>() / nf;
                    let gy_mean = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for j in 0..n {
                        dx[row * n + j] = inv * (gr[j] - g_mean - yr[j] * gy_mean);
                    }
                }
                vec![Tensor::new(y.shape().to_vec(), dx)?]
            }
            Op::SumAll => {
                let shape = in_val(0).shape().to_vec();
                vec![Tensor::full(&shape, g.item()?)]
            }
            Op::MeanAll => {
                let shape = in_val(0).shape().to_vec();
                let n: usize = shape.iter().product();
                vec![Tensor::full(&shape, g.item()? / n as f64)]
            }
        };
        Ok(out)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    debug_assert_eq!(k, b.shape()[0]);
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        for l in 0..k {
            let ail = ad[i * k + l];
            if ail == 0.0 {
                continue;
            }
            let brow = &bd[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += ail * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul shape")
}

pub(crate) fn transpose_raw(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out).expect("transpose shape")
}

/// Sum `g` down to `target` shape, inverting a broadcast.
fn reduce_to_shape(g: &Tensor, target: &[usize]) -> Tensor {
    if g.shape() == target {
        return g.clone();
    }
    let st = broadcast_strides(target, g.shape());
    let zero = vec![0usize; g.shape().len()];
    let mut out = vec![0.0; target.iter().product()];
    let gd = g.data();
    for_each_broadcast(g.shape(), &st, &zero, |lin, ot, _| {
        out[ot] += gd[lin];
    });
    Tensor::new(target.to_vec(), out).expect("reduce shape")
}
