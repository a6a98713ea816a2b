use std::sync::Arc;

use super::gemm::{gemm, Layout};
use super::params::{ParamId, ParameterSet};
use super::{AutodiffError, Tensor};
use crate::par::{self, Exec};

/// Marks a gathered column with no source.
pub const GATHER_NONE: u32 = u32::MAX;

/// Floor applied to probabilities inside the cross-entropy logarithm.
const PROB_FLOOR: f32 = 1e-30;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    HeavisideSte(NodeId),
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        k: NodeId,
        b: NodeId,
        cols: Vec<f32>,
    },
    SoftmaxMasked {
        logits: NodeId,
        support: Vec<Vec<u32>>,
    },
    CrossEntropy {
        probs: NodeId,
        targets: Vec<Vec<(u32, f32)>>,
    },
    L1Sum(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    GatherCols {
        x: NodeId,
        map: Arc<[u32]>,
    },
    ChannelGate {
        x: NodeId,
        gate: NodeId,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<(u64, ParamId)>,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Tensor>,
}

/// A tape of operations recorded in execution order.
///
/// Leaves created with [`Graph::leaf`] or [`Graph::param`] are trainable and
/// accumulate gradients across calls to [`Graph::backward`] until
/// [`Graph::zero_grad`]. Intermediate gradients are recomputed on each call.
pub struct Graph {
    nodes: Vec<Node>,
    exec: Exec,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> AutodiffError {
    AutodiffError::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Graph {
        Graph {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient of a trainable leaf, `None` before any backward
    /// pass or for non-leaf nodes.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = &mut n.grad {
                g.fill(0.0);
            }
        }
    }

    /// A value that takes no gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// A trainable value.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// A trainable leaf holding a copy of a parameter; its gradient can be
    /// folded back with [`ParameterSet::accumulate_grads`].
    pub fn param(&mut self, params: &ParameterSet, id: ParamId) -> NodeId {
        let node = self.leaf(params.value(id).clone());
        self.nodes[node.0].param = Some((params.uid, id));
        node
    }

    pub(crate) fn param_leaves(&self, set: u64) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.nodes.iter().filter_map(move |n| match n.param {
            Some((uid, id)) if uid == set => Some((id, n.grad.as_ref()?)),
            _ => None,
        })
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape(), data)
        } else if vb.is_scalar() {
            let y = vb.item();
            Tensor::new(va.shape(), va.data().iter().map(|&x| f(x, y)).collect())
        } else if va.is_scalar() {
            let x = va.item();
            Tensor::new(vb.shape(), vb.data().iter().map(|&y| f(x, y)).collect())
        } else {
            return Err(shape_err(name, va.shape(), vb.shape()));
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f32) -> NodeId {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f32) -> f32, op: Op) -> NodeId {
        let va = &self.nodes[a.0].value;
        let value = Tensor::new(va.shape(), va.data().iter().map(|&x| f(x)).collect());
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f32::tanh, Op::Tanh(a))
    }

    /// Step function with `H(0) = 1`. The backward pass hands the incoming
    /// gradient through unchanged (straight-through estimator).
    pub fn heaviside_ste(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| if x >= 0.0 { 1.0 } else { 0.0 }, Op::HeavisideSte(a))
    }

    /// `x: [batch, in]`, `w: [in, out]`, `b: [out]` to `[batch, out]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vx.shape().len() != 2 || vw.shape().len() != 2 || vx.shape()[1] != vw.shape()[0] {
            return Err(shape_err("dense", vx.shape(), vw.shape()));
        }
        let (batch, inp, out) = (vx.shape()[0], vw.shape()[0], vw.shape()[1]);
        if vb.shape() != [out] {
            return Err(shape_err("dense bias", vw.shape(), vb.shape()));
        }
        let mut y = Vec::with_capacity(batch * out);
        for _ in 0..batch {
            y.extend_from_slice(vb.data());
        }
        gemm(batch, inp, out, vx.data(), Layout::Normal, vw.data(), Layout::Normal, 1.0, &mut y);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new(&[batch, out], y), Op::Dense { x, w, b }, rg))
    }

    /// Same-padded, stride-one cross-correlation.
    /// `x: [batch, h, w, c_in]`, `k: [s, s, c_in, c_out]` with odd `s`,
    /// `b: [c_out]` to `[batch, h, w, c_out]`.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (vx, vk, vb) = (self.value(x), self.value(k), self.value(b));
        let (xs, ks) = (vx.shape(), vk.shape());
        if xs.len() != 4 || ks.len() != 4 || ks[0] != ks[1] || ks[0] % 2 == 0 || xs[3] != ks[2] {
            return Err(shape_err("conv2d", xs, ks));
        }
        let (batch, h, w, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (size, cout) = (ks[0], ks[3]);
        if vb.shape() != [cout] {
            return Err(shape_err("conv2d bias", ks, vb.shape()));
        }
        let pixels = h * w;
        let patch = size * size * cin;
        let mut cols = vec![0.0f32; batch * pixels * patch];
        let xdata = vx.data();
        par::for_each_chunk_mut(self.exec, &mut cols, pixels * patch, |bi, chunk| {
            im2col(&xdata[bi * pixels * cin..(bi + 1) * pixels * cin], h, w, cin, size, chunk);
        });
        let mut y = Vec::with_capacity(batch * pixels * cout);
        for _ in 0..batch * pixels {
            y.extend_from_slice(vb.data());
        }
        let kdata = vk.data();
        par::for_each_chunk_mut(self.exec, &mut y, pixels * cout, |bi, out| {
            let c = &cols[bi * pixels * patch..(bi + 1) * pixels * patch];
            gemm(pixels, patch, cout, c, Layout::Normal, kdata, Layout::Normal, 1.0, out);
        });
        let rg = self.rg(&[x, k, b]);
        Ok(self.push(
            Tensor::new(&[batch, h, w, cout], y),
            Op::Conv2d { x, k, b, cols },
            rg,
        ))
    }

    /// Row-wise softmax over `[batch, n]` logits restricted to each row's
    /// support; entries off the support are exactly zero.
    pub fn softmax_masked(
        &mut self,
        logits: NodeId,
        support: &[Vec<u32>],
    ) -> Result<NodeId, AutodiffError> {
        let v = self.value(logits);
        if v.shape().len() != 2 || v.shape()[0] != support.len() {
            return Err(shape_err("softmax_masked", v.shape(), &[support.len()]));
        }
        let n = v.shape()[1];
        let mut out = vec![0.0f32; v.len()];
        for (row, sup) in support.iter().enumerate() {
            if sup.is_empty() {
                return Err(AutodiffError::EmptySupport { row });
            }
            let z = &v.data()[row * n..(row + 1) * n];
            if let Some(&bad) = sup.iter().find(|&&i| i as usize >= n) {
                return Err(shape_err("softmax_masked support", &[bad as usize], &[n]));
            }
            let max = sup.iter().map(|&i| z[i as usize]).fold(f32::NEG_INFINITY, f32::max);
            let total: f64 = sup.iter().map(|&i| ((z[i as usize] - max) as f64).exp()).sum();
            let o = &mut out[row * n..(row + 1) * n];
            for &i in sup {
                o[i as usize] = (((z[i as usize] - max) as f64).exp() / total) as f32;
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::new(v.shape(), out),
            Op::SoftmaxMasked {
                logits,
                support: support.to_vec(),
            },
            rg,
        ))
    }

    /// Per-row cross-entropy `-sum t ln p` against sparse targets, `[batch]`.
    pub fn cross_entropy(
        &mut self,
        probs: NodeId,
        targets: &[Vec<(u32, f32)>],
    ) -> Result<NodeId, AutodiffError> {
        let v = self.value(probs);
        if v.shape().len() != 2 || v.shape()[0] != targets.len() {
            return Err(shape_err("cross_entropy", v.shape(), &[targets.len()]));
        }
        let n = v.shape()[1];
        let mut out = Vec::with_capacity(targets.len());
        for (row, t) in targets.iter().enumerate() {
            let p = &v.data()[row * n..(row + 1) * n];
            let mut acc = 0.0f64;
            for &(i, ti) in t {
                if i as usize >= n {
                    return Err(shape_err("cross_entropy target", &[i as usize], &[n]));
                }
                if ti != 0.0 {
                    acc -= ti as f64 * (p[i as usize].max(PROB_FLOOR) as f64).ln();
                }
            }
            out.push(acc as f32);
        }
        let rg = self.rg(&[probs]);
        Ok(self.push(
            Tensor::from_vec(out),
            Op::CrossEntropy {
                probs,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Sum of absolute values; subgradient `sign(x)` with `sign(0) = 0`.
    pub fn l1_sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().map(|&x| x.abs() as f64).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s as f32), Op::L1Sum(a), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().map(|&x| x as f64).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s as f32), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s: f64 = v.data().iter().map(|&x| x as f64).sum();
        let m = if v.is_empty() { 0.0 } else { s / v.len() as f64 };
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m as f32), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        let v = self.value(a);
        if shape.iter().product::<usize>() != v.len() {
            return Err(shape_err("reshape", v.shape(), shape));
        }
        let t = v.clone().reshaped(shape);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// `out[b, j] = x[b, map[j]]`, or zero where `map[j] == GATHER_NONE`.
    pub fn gather_cols(&mut self, x: NodeId, map: Arc<[u32]>) -> Result<NodeId, AutodiffError> {
        let v = self.value(x);
        if v.shape().len() != 2 {
            return Err(shape_err("gather_cols", v.shape(), &[map.len()]));
        }
        let (batch, src) = (v.shape()[0], v.shape()[1]);
        if let Some(&bad) = map.iter().find(|&&m| m != GATHER_NONE && m as usize >= src) {
            return Err(shape_err("gather_cols index", &[bad as usize], &[src]));
        }
        let n = map.len();
        let mut out = vec![0.0f32; batch * n];
        for b in 0..batch {
            let row = &v.data()[b * src..(b + 1) * src];
            for (o, &m) in out[b * n..(b + 1) * n].iter_mut().zip(map.iter()) {
                if m != GATHER_NONE {
                    *o = row[m as usize];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[batch, n], out), Op::GatherCols { x, map }, rg))
    }

    /// Multiplies the first `g` channels of `x: [.., c]` by `gate: [.., g]`
    /// and passes the remaining channels through.
    pub fn channel_gate(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId, AutodiffError> {
        let (vx, vg) = (self.value(x), self.value(gate));
        let (xs, gs) = (vx.shape(), vg.shape());
        if xs.len() != gs.len()
            || xs.is_empty()
            || xs[..xs.len() - 1] != gs[..gs.len() - 1]
            || gs[gs.len() - 1] > xs[xs.len() - 1]
        {
            return Err(shape_err("channel_gate", xs, gs));
        }
        let c = xs[xs.len() - 1];
        let g = gs[gs.len() - 1];
        let mut out = vx.data().to_vec();
        for (cell, gcell) in out.chunks_exact_mut(c).zip(vg.data().chunks_exact(g)) {
            for (v, &m) in cell[..g].iter_mut().zip(gcell) {
                *v = if m == 0.0 { 0.0 } else { *v * m };
            }
        }
        let t = Tensor::new(xs, out);
        let rg = self.rg(&[x, gate]);
        Ok(self.push(t, Op::ChannelGate { x, gate }, rg))
    }

    /// Reverse pass from a scalar `loss`. Gradients add onto whatever the
    /// trainable leaves already hold.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), AutodiffError> {
        if !self.value(loss).is_scalar() {
            return Err(AutodiffError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<(usize, Vec<f32>)> = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut send = |id: NodeId, f: &dyn Fn(&mut [f32])| {
                let n = &nodes[id.0];
                if n.requires_grad {
                    let buf = grads[id.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
                    f(buf);
                }
            };
            let val = |id: NodeId| nodes[id.0].value.data();
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    send(*a, &|buf| reduce_into(buf, &g, 1.0));
                    send(*b, &|buf| reduce_into(buf, &g, sign));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    send(*a, &|buf| mul_grad_into(buf, &g, vb));
                    send(*b, &|buf| mul_grad_into(buf, &g, va));
                }
                Op::Scale(a, s) => {
                    send(*a, &|buf| buf.iter_mut().zip(&g).for_each(|(d, &gi)| *d += gi * s));
                }
                Op::Relu(a) => {
                    let x = val(*a);
                    send(*a, &|buf| {
                        for ((d, &gi), &xi) in buf.iter_mut().zip(&g).zip(x) {
                            if xi > 0.0 {
                                *d += gi;
                            }
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    send(*a, &|buf| {
                        for ((d, &gi), &yi) in buf.iter_mut().zip(&g).zip(y) {
                            *d += gi * yi * (1.0 - yi);
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    send(*a, &|buf| {
                        for ((d, &gi), &yi) in buf.iter_mut().zip(&g).zip(y) {
                            *d += gi * (1.0 - yi * yi);
                        }
                    });
                }
                Op::HeavisideSte(a) => {
                    send(*a, &|buf| buf.iter_mut().zip(&g).for_each(|(d, &gi)| *d += gi));
                }
                Op::Dense { x, w, b } => {
                    let (vx, vw) = (&nodes[x.0].value, &nodes[w.0].value);
                    let (batch, inp, out) = (vx.shape()[0], vw.shape()[0], vw.shape()[1]);
                    send(*b, &|buf| bias_grad_into(buf, &g, out));
                    send(*w, &|buf| {
                        gemm(inp, batch, out, vx.data(), Layout::Transposed, &g, Layout::Normal, 1.0, buf)
                    });
                    send(*x, &|buf| {
                        gemm(batch, out, inp, &g, Layout::Normal, vw.data(), Layout::Transposed, 1.0, buf)
                    });
                }
                Op::Conv2d { x, k, b, cols } => {
                    let xs = nodes[x.0].value.shape();
                    let ks = nodes[k.0].value.shape();
                    let (batch, h, w, cin) = (xs[0], xs[1], xs[2], xs[3]);
                    let (size, cout) = (ks[0], ks[3]);
                    let rows = batch * h * w;
                    let patch = size * size * cin;
                    send(*b, &|buf| bias_grad_into(buf, &g, cout));
                    send(*k, &|buf| {
                        gemm(patch, rows, cout, cols, Layout::Transposed, &g, Layout::Normal, 1.0, buf)
                    });
                    let kdata = nodes[k.0].value.data();
                    let exec = self.exec;
                    send(*x, &|buf| {
                        let pixels = h * w;
                        par::for_each_chunk_mut(exec, buf, pixels * cin, |bi, dx| {
                            let mut dcols = vec![0.0f32; pixels * patch];
                            let gi = &g[bi * pixels * cout..(bi + 1) * pixels * cout];
                            gemm(pixels, cout, patch, gi, Layout::Normal, kdata, Layout::Transposed, 0.0, &mut dcols);
                            col2im(&dcols, h, w, cin, size, dx);
                        });
                    });
                }
                Op::SoftmaxMasked { logits, support } => {
                    let p = node.value.data();
                    let n = node.value.shape()[1];
                    send(*logits, &|buf| {
                        for (row, sup) in support.iter().enumerate() {
                            let (pr, gr) = (&p[row * n..(row + 1) * n], &g[row * n..(row + 1) * n]);
                            let dot: f64 = sup
                                .iter()
                                .map(|&i| pr[i as usize] as f64 * gr[i as usize] as f64)
                                .sum();
                            let br = &mut buf[row * n..(row + 1) * n];
                            for &i in sup {
                                let i = i as usize;
                                br[i] += (pr[i] as f64 * (gr[i] as f64 - dot)) as f32;
                            }
                        }
                    });
                }
                Op::CrossEntropy { probs, targets } => {
                    let p = nodes[probs.0].value.data();
                    let n = nodes[probs.0].value.shape()[1];
                    send(*probs, &|buf| {
                        for (row, t) in targets.iter().enumerate() {
                            for &(i, ti) in t {
                                let idx = row * n + i as usize;
                                buf[idx] -= g[row] * ti / p[idx].max(PROB_FLOOR);
                            }
                        }
                    });
                }
                Op::L1Sum(a) => {
                    let x = val(*a);
                    let g0 = g[0];
                    send(*a, &|buf| {
                        for (d, &xi) in buf.iter_mut().zip(x) {
                            if xi > 0.0 {
                                *d += g0;
                            } else if xi < 0.0 {
                                *d -= g0;
                            }
                        }
                    });
                }
                Op::Sum(a) => {
                    let g0 = g[0];
                    send(*a, &|buf| buf.iter_mut().for_each(|d| *d += g0));
                }
                Op::Mean(a) => {
                    let n = nodes[a.0].value.len().max(1);
                    let g0 = g[0] / n as f32;
                    send(*a, &|buf| buf.iter_mut().for_each(|d| *d += g0));
                }
                Op::Reshape(a) => {
                    send(*a, &|buf| buf.iter_mut().zip(&g).for_each(|(d, &gi)| *d += gi));
                }
                Op::GatherCols { x, map } => {
                    let src = nodes[x.0].value.shape()[1];
                    let n = map.len();
                    send(*x, &|buf| {
                        for (brow, grow) in buf.chunks_exact_mut(src).zip(g.chunks_exact(n)) {
                            for (&m, &gi) in map.iter().zip(grow) {
                                if m != GATHER_NONE {
                                    brow[m as usize] += gi;
                                }
                            }
                        }
                    });
                }
                Op::ChannelGate { x, gate } => {
                    let vx = &nodes[x.0].value;
                    let vg = &nodes[gate.0].value;
                    let c = *vx.shape().last().unwrap();
                    let gc = *vg.shape().last().unwrap();
                    send(*x, &|buf| {
                        for ((bcell, gcell), mcell) in buf
                            .chunks_exact_mut(c)
                            .zip(g.chunks_exact(c))
                            .zip(vg.data().chunks_exact(gc))
                        {
                            for j in 0..c {
                                bcell[j] += if j < gc { gcell[j] * mcell[j] } else { gcell[j] };
                            }
                        }
                    });
                    send(*gate, &|buf| {
                        for ((bcell, gcell), xcell) in buf
                            .chunks_exact_mut(gc)
                            .zip(g.chunks_exact(c))
                            .zip(vx.data().chunks_exact(c))
                        {
                            for j in 0..gc {
                                bcell[j] += gcell[j] * xcell[j];
                            }
                        }
                    });
                }
            }
        }

        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                None => node.grad = Some(Tensor::new(node.value.shape(), g)),
            }
        }
        // Reachable-or-not, every trainable leaf reports a gradient.
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.requires_grad && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adds `sign * g` into `buf`, summing when `buf` is a broadcast scalar.
fn reduce_into(buf: &mut [f32], g: &[f32], sign: f32) {
    if buf.len() == g.len() {
        buf.iter_mut().zip(g).for_each(|(d, &gi)| *d += sign * gi);
    } else {
        let s: f64 = g.iter().map(|&x| x as f64).sum();
        buf[0] += sign * s as f32;
    }
}

/// Gradient of one factor of a (possibly broadcast) product.
fn mul_grad_into(buf: &mut [f32], g: &[f32], other: &[f32]) {
    if buf.len() == g.len() {
        if other.len() == g.len() {
            for ((d, &gi), &o) in buf.iter_mut().zip(g).zip(other) {
                *d += gi * o;
            }
        } else {
            let o = other[0];
            buf.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * o);
        }
    } else {
        let s: f64 = g.iter().zip(other).map(|(&gi, &o)| gi as f64 * o as f64).sum();
        buf[0] += s as f32;
    }
}

fn bias_grad_into(buf: &mut [f32], g: &[f32], width: usize) {
    let mut acc = vec![0.0f64; width];
    for row in g.chunks_exact(width) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    for (d, a) in buf.iter_mut().zip(acc) {
        *d += a as f32;
    }
}

/// Unfolds one `[h, w, c]` image into `[h * w, size * size * c]` patches.
fn im2col(x: &[f32], h: usize, w: usize, c: usize, size: usize, cols: &mut [f32]) {
    let pad = (size / 2) as isize;
    let patch = size * size * c;
    for y in 0..h {
        for xx in 0..w {
            let row = &mut cols[(y * w + xx) * patch..(y * w + xx + 1) * patch];
            for ky in 0..size {
                let iy = y as isize + ky as isize - pad;
                for kx in 0..size {
                    let ix = xx as isize + kx as isize - pad;
                    let dst = &mut row[(ky * size + kx) * c..(ky * size + kx + 1) * c];
                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                        let src = (iy as usize * w + ix as usize) * c;
                        dst.copy_from_slice(&x[src..src + c]);
                    } else {
                        dst.fill(0.0);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients into `dx`.
fn col2im(dcols: &[f32], h: usize, w: usize, c: usize, size: usize, dx: &mut [f32]) {
    let pad = (size / 2) as isize;
    let patch = size * size * c;
    for y in 0..h {
        for xx in 0..w {
            let row = &dcols[(y * w + xx) * patch..(y * w + xx + 1) * patch];
            for ky in 0..size {
                let iy = y as isize + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..size {
                    let ix = xx as isize + kx as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * c;
                    let src = &row[(ky * size + kx) * c..(ky * size + kx + 1) * c];
                    for (d, &s) in dx[dst..dst + c].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}
