use std::sync::Arc;

use crate::error::{ensure_dim, Error, Result};
use crate::tensor::{gemm, Tensor};

use super::kernels::{self, ConvGeom};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Pow(NodeId, f64),
    /// Tensor times a one-element node.
    ScaleBy(NodeId, NodeId),
    Sum(NodeId),
    Reshape(NodeId),
    Slice { src: NodeId, offset: usize },
    Embed { src: NodeId, offset: usize },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// `[C]` spread along axis 1 of the node's shape.
    BroadcastChannel(NodeId),
    /// Sum over every axis except axis 1.
    SumChannel(NodeId),
    Conv2d(NodeId, NodeId, ConvGeom),
    ConvBackInput(NodeId, NodeId, ConvGeom),
    ConvBackWeight(NodeId, NodeId, ConvGeom),
    Gather(NodeId, Arc<[usize]>),
    ScatterAdd(NodeId, Arc<[usize]>),
    /// Summed softmax cross-entropy over the rows of `[N, c]` logits.
    SoftmaxCe(NodeId, Arc<[usize]>),
    /// Row-wise `softmax(s) − e_y`.
    SoftmaxCeGrad(NodeId),
    /// Row-wise `(diag(p) − p pᵀ) u`.
    SoftmaxHvp(NodeId, NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Pow(..) => "pow",
            Op::ScaleBy(..) => "scale_by",
            Op::Sum(..) => "sum",
            Op::Reshape(..) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Embed { .. } => "embed",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::BroadcastChannel(..) => "broadcast_channel",
            Op::SumChannel(..) => "sum_channel",
            Op::Conv2d(..) => "conv2d",
            Op::ConvBackInput(..) => "conv2d_back_input",
            Op::ConvBackWeight(..) => "conv2d_back_weight",
            Op::Gather(..) => "gather",
            Op::ScatterAdd(..) => "scatter_add",
            Op::SoftmaxCe(..) => "softmax_ce",
            Op::SoftmaxCeGrad(..) => "softmax_ce_grad",
            Op::SoftmaxHvp(..) => "softmax_hvp",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Eagerly evaluated computation record. Nodes are appended in topological
/// order; `backward` appends the adjoint computation to the same graph, so
/// a gradient can itself be differentiated once more.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    non_finite: Option<(usize, &'static str)>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Fails with the first node whose value was not finite.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some((node, op)) => Err(Error::NonFinite { node, op }),
            None => Ok(()),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        let id = self.nodes.len();
        if self.non_finite.is_none() && !value.all_finite() {
            self.non_finite = Some((id, op.name()));
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(id)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, value, false)
    }

    fn same_shape(&self, a: NodeId, b: NodeId) -> Result<()> {
        ensure_dim!(
            self.shape(a) == self.shape(b),
            "operand shapes differ: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Sub(a, b), v, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul(a, b), v, rg))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| -x);
        let rg = self.rg(&[a]);
        self.push(Op::Neg(a), v, rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| c * x);
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, c), v, rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(Op::AddScalar(a), v, rg)
    }

    pub fn pow(&mut self, a: NodeId, p: f64) -> NodeId {
        let v = self.value(a).map(|x| x.powf(p));
        let rg = self.rg(&[a]);
        self.push(Op::Pow(a, p), v, rg)
    }

    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        ensure_dim!(
            self.value(s).len() == 1,
            "scale_by needs a one-element factor, got {:?}",
            self.shape(s)
        );
        let c = self.value(s).item();
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a, s]);
        Ok(self.push(Op::ScaleBy(a, s), v, rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let mut acc = 0.0;
        for v in self.value(a).data() {
            acc += v;
        }
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), Tensor::scalar(acc), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `Σ a ⊙ b` as a scalar node.
    pub fn inner(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let m = self.mul(a, b)?;
        Ok(self.sum(m))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let v = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Reshape(a), v, rg))
    }

    /// Contiguous 1-D window `[offset, offset + len)` of a flattened node.
    pub fn slice(&mut self, src: NodeId, offset: usize, len: usize) -> Result<NodeId> {
        let data = self.value(src).data();
        ensure_dim!(
            offset + len <= data.len(),
            "slice [{offset}, {}) out of range for length {}",
            offset + len,
            data.len()
        );
        let v = Tensor::from_vec(data[offset..offset + len].to_vec());
        let rg = self.rg(&[src]);
        Ok(self.push(Op::Slice { src, offset }, v, rg))
    }

    /// Places a flattened node at `offset` inside a zero vector of `total`.
    pub fn embed(&mut self, src: NodeId, offset: usize, total: usize) -> Result<NodeId> {
        let data = self.value(src).data();
        ensure_dim!(
            offset + data.len() <= total,
            "embed of {} values at {offset} exceeds {total}",
            data.len()
        );
        let mut out = vec![0.0; total];
        out[offset..offset + data.len()].copy_from_slice(data);
        let rg = self.rg(&[src]);
        Ok(self.push(Op::Embed { src, offset }, Tensor::from_vec(out), rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        ensure_dim!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul of {:?} and {:?}",
            sa,
            sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?, rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        ensure_dim!(s.len() == 2, "transpose of rank-{} tensor", s.len());
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Transpose(a), Tensor::new(vec![c, r], out)?, rg))
    }

    pub fn broadcast_channel(&mut self, b: NodeId, shape: &[usize]) -> Result<NodeId> {
        let c = self.value(b).len();
        ensure_dim!(
            shape.len() >= 2 && shape[1] == c,
            "cannot broadcast {c} channels over {:?}",
            shape
        );
        let inner: usize = shape[2..].iter().product();
        let src = self.value(b).data();
        let mut out = Vec::with_capacity(shape.iter().product());
        for _ in 0..shape[0] {
            for &bc in src {
                out.extend(std::iter::repeat_n(bc, inner));
            }
        }
        let rg = self.rg(&[b]);
        Ok(self.push(Op::BroadcastChannel(b), Tensor::new(shape.to_vec(), out)?, rg))
    }

    pub fn sum_channel(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        ensure_dim!(s.len() >= 2, "sum_channel of rank-{} tensor", s.len());
        let c = s[1];
        let inner: usize = s[2..].iter().product();
        let src = self.value(a).data();
        let mut out = vec![0.0; c];
        for n in 0..s[0] {
            for (ch, o) in out.iter_mut().enumerate() {
                let base = (n * c + ch) * inner;
                for v in &src[base..base + inner] {
                    *o += v;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SumChannel(a), Tensor::from_vec(out), rg))
    }

    fn conv_geom_for(&self, x_shape: &[usize], geom: &ConvGeom) -> Result<ConvGeom> {
        ensure_dim!(
            x_shape.len() == 4
                && x_shape[1] == geom.in_ch
                && x_shape[2] == geom.in_h
                && x_shape[3] == geom.in_w,
            "conv input {:?} does not match geometry {:?}",
            x_shape,
            geom
        );
        Ok(geom.with_batch(x_shape[0]))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, geom: &ConvGeom) -> Result<NodeId> {
        let g = self.conv_geom_for(self.shape(x), geom)?;
        ensure_dim!(
            self.shape(w) == g.weight_shape(),
            "conv weight {:?}, expected {:?}",
            self.shape(w),
            g.weight_shape()
        );
        let y = kernels::conv2d(self.value(x).data(), self.value(w).data(), &g);
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            Op::Conv2d(x, w, g),
            Tensor::new(g.output_shape().to_vec(), y)?,
            rg,
        ))
    }

    fn conv_back_input(&mut self, gy: NodeId, w: NodeId, g: ConvGeom) -> Result<NodeId> {
        let gx = kernels::conv2d_back_input(self.value(gy).data(), self.value(w).data(), &g);
        let rg = self.rg(&[gy, w]);
        Ok(self.push(
            Op::ConvBackInput(gy, w, g),
            Tensor::new(g.input_shape().to_vec(), gx)?,
            rg,
        ))
    }

    fn conv_back_weight(&mut self, x: NodeId, gy: NodeId, g: ConvGeom) -> Result<NodeId> {
        let gw = kernels::conv2d_back_weight(self.value(x).data(), self.value(gy).data(), &g);
        let rg = self.rg(&[x, gy]);
        Ok(self.push(
            Op::ConvBackWeight(x, gy, g),
            Tensor::new(g.weight_shape().to_vec(), gw)?,
            rg,
        ))
    }

    /// `out[i] = src[indices[i]]`, shaped `shape`.
    pub fn gather(&mut self, src: NodeId, indices: Arc<[usize]>, shape: &[usize]) -> Result<NodeId> {
        let data = self.value(src).data();
        ensure_dim!(
            indices.len() == shape.iter().product::<usize>(),
            "gather of {} indices into shape {:?}",
            indices.len(),
            shape
        );
        ensure_dim!(
            indices.iter().all(|&i| i < data.len()),
            "gather index out of range for length {}",
            data.len()
        );
        let out: Vec<f64> = indices.iter().map(|&i| data[i]).collect();
        let rg = self.rg(&[src]);
        Ok(self.push(Op::Gather(src, indices), Tensor::new(shape.to_vec(), out)?, rg))
    }

    /// `out[indices[i]] += src[i]` into zeros of `shape`.
    pub fn scatter_add(&mut self, src: NodeId, indices: Arc<[usize]>, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        let data = self.value(src).data();
        ensure_dim!(
            indices.len() == data.len(),
            "scatter of {} values with {} indices",
            data.len(),
            indices.len()
        );
        let mut out = vec![0.0; numel];
        for (&i, &v) in indices.iter().zip(data) {
            out[i] += v;
        }
        let rg = self.rg(&[src]);
        Ok(self.push(Op::ScatterAdd(src, indices), Tensor::new(shape.to_vec(), out)?, rg))
    }

    /// `x ⊙ step(x)` where the step is 0 at 0 and treated as a constant.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let mask = self.value(x).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let m = self.constant(mask);
        self.mul(x, m)
    }

    fn logits_dims(&self, s: NodeId, labels: &[usize]) -> Result<(usize, usize)> {
        let sh = self.shape(s);
        ensure_dim!(sh.len() == 2, "logits must be [N, c], got {:?}", sh);
        let (n, c) = (sh[0], sh[1]);
        ensure_dim!(labels.len() == n, "{} labels for {n} rows", labels.len());
        ensure_dim!(
            labels.iter().all(|&y| y < c),
            "label out of range for {c} classes"
        );
        Ok((n, c))
    }

    /// Sum over rows of `log Σ exp(s) − s_y`.
    pub fn softmax_ce(&mut self, s: NodeId, labels: Arc<[usize]>) -> Result<NodeId> {
        let (_, c) = self.logits_dims(s, &labels)?;
        let mut acc = 0.0;
        for (row, &y) in self.value(s).data().chunks(c).zip(labels.iter()) {
            acc += kernels::softmax_ce_row(row, y);
        }
        let rg = self.rg(&[s]);
        Ok(self.push(Op::SoftmaxCe(s, labels), Tensor::scalar(acc), rg))
    }

    fn softmax_ce_grad(&mut self, s: NodeId, labels: Arc<[usize]>) -> Result<NodeId> {
        let (n, c) = self.logits_dims(s, &labels)?;
        let mut out = vec![0.0; n * c];
        for ((row, o), &y) in self
            .value(s)
            .data()
            .chunks(c)
            .zip(out.chunks_mut(c))
            .zip(labels.iter())
        {
            kernels::softmax_row(row, o);
            o[y] -= 1.0;
        }
        let rg = self.rg(&[s]);
        Ok(self.push(Op::SoftmaxCeGrad(s), Tensor::new(vec![n, c], out)?, rg))
    }

    fn softmax_hvp(&mut self, s: NodeId, u: NodeId) -> Result<NodeId> {
        self.same_shape(s, u)?;
        let c = self.shape(s)[1];
        let mut out = vec![0.0; self.value(s).len()];
        let mut p = vec![0.0; c];
        for ((row, ur), o) in self
            .value(s)
            .data()
            .chunks(c)
            .zip(self.value(u).data().chunks(c))
            .zip(out.chunks_mut(c))
        {
            kernels::softmax_row(row, &mut p);
            kernels::softmax_hvp_row(&p, ur, o);
        }
        let shape = self.shape(s).to_vec();
        let rg = self.rg(&[s, u]);
        Ok(self.push(Op::SoftmaxHvp(s, u), Tensor::new(shape, out)?, rg))
    }

    fn accumulate(&mut self, adj: &mut [Option<NodeId>], target: NodeId, contrib: NodeId) -> Result<()> {
        if !self.nodes[target.0].requires_grad {
            return Ok(());
        }
        adj[target.0] = Some(match adj[target.0] {
            None => contrib,
            Some(prev) => self.add(prev, contrib)?,
        });
        Ok(())
    }

    /// Reverse pass from `output` (any shape; seeded with ones). Returns one
    /// gradient node per entry of `wrt`, zero-valued constants where the
    /// output does not depend on it. The adjoint computation is recorded, so
    /// the returned nodes can be differentiated again.
    pub fn backward(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        let end = output.0 + 1;
        let mut adj: Vec<Option<NodeId>> = vec![None; end];
        let seed = self.constant(Tensor::full(self.shape(output), 1.0));
        adj[output.0] = Some(seed);

        for i in (0..end).rev() {
            let Some(u) = adj[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let rg = |g: &Graph, id: NodeId| g.nodes[id.0].requires_grad;
            match op {
                Op::Leaf | Op::Const => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, a, u)?;
                    self.accumulate(&mut adj, b, u)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adj, a, u)?;
                    if rg(self, b) {
                        let n = self.neg(u);
                        self.accumulate(&mut adj, b, n)?;
                    }
                }
                Op::Mul(a, b) => {
                    if rg(self, a) {
                        let d = self.mul(u, b)?;
                        self.accumulate(&mut adj, a, d)?;
                    }
                    if rg(self, b) {
                        let d = self.mul(u, a)?;
                        self.accumulate(&mut adj, b, d)?;
                    }
                }
                Op::Neg(a) => {
                    let d = self.neg(u);
                    self.accumulate(&mut adj, a, d)?;
                }
                Op::Scale(a, c) => {
                    let d = self.scale(u, c);
                    self.accumulate(&mut adj, a, d)?;
                }
                Op::AddScalar(a) => self.accumulate(&mut adj, a, u)?,
                Op::Pow(a, p) => {
                    let lower = self.pow(a, p - 1.0);
                    let local = self.scale(lower, p);
                    let d = self.mul(u, local)?;
                    self.accumulate(&mut adj, a, d)?;
                }
                Op::ScaleBy(a, s) => {
                    if rg(self, a) {
                        let d = self.scale_by(u, s)?;
                        self.accumulate(&mut adj, a, d)?;
                    }
                    if rg(self, s) {
                        let t = self.inner(u, a)?;
                        let shape = self.shape(s).to_vec();
                        let d = self.reshape(t, &shape)?;
                        self.accumulate(&mut adj, s, d)?;
                    }
                }
                Op::Sum(a) => {
                    let ones = self.constant(Tensor::full(self.shape(a), 1.0));
                    let d = self.scale_by(ones, u)?;
                    self.accumulate(&mut adj, a, d)?;
                }
                Op::Reshape(a) => {
                    let shape = self.shape(a).to_vec();
                    let d = self.reshape(u, &shape)?;
                    self.accumulate(&mut adj, a, d)?;
                }
                Op::Slice { src, offset } => {
                    let total = self.value(src).len();
                    let e = self.embed(u, offset, total)?;
                    let shape = self.shape(src).to_vec();
                    let d = self.reshape(e, &shape)?;
                    self.accumulate(&mut adj, src, d)?;
                }
                Op::Embed { src, offset } => {
                    let len = self.value(src).len();
                    let s = self.slice(u, offset, len)?;
                    let shape = self.shape(src).to_vec();
                    let d = self.reshape(s, &shape)?;
                    self.accumulate(&mut adj, src, d)?;
                }
                Op::MatMul(a, b) => {
                    if rg(self, a) {
                        let bt = self.transpose(b)?;
                        let d = self.matmul(u, bt)?;
                        self.accumulate(&mut adj, a, d)?;
                    }
                    if rg(self, b) {
                        let at = self.transpose(a)?;
                        let d = self.matmul(at, u)?;
                        self.accumulate(&mut adj, b, d)?;
                    }
                }
                Op::Transpose(a) => {
                    let d = self.transpose(u)?;
                    self.accumulate(&mut adj, a, d)?;
                }
                Op::BroadcastChannel(b) => {
                    let d = self.sum_channel(u)?;
                    self.accumulate(&mut adj, b, d)?;
                }
                Op::SumChannel(a) => {
                    let shape = self.shape(a).to_vec();
                    let d = self.broadcast_channel(u, &shape)?;
                    self.accumulate(&mut adj, a, d)?;
                }
                Op::Conv2d(x, w, g) => {
                    if rg(self, x) {
                        let d = self.conv_back_input(u, w, g)?;
                        self.accumulate(&mut adj, x, d)?;
                    }
                    if rg(self, w) {
                        let d = self.conv_back_weight(x, u, g)?;
                        self.accumulate(&mut adj, w, d)?;
                    }
                }
                Op::ConvBackInput(gy, w, g) => {
                    if rg(self, gy) {
                        let d = self.conv2d(u, w, &g)?;
                        self.accumulate(&mut adj, gy, d)?;
                    }
                    if rg(self, w) {
                        let d = self.conv_back_weight(u, gy, g)?;
                        self.accumulate(&mut adj, w, d)?;
                    }
                }
                Op::ConvBackWeight(x, gy, g) => {
                    if rg(self, x) {
                        let d = self.conv_back_input(gy, u, g)?;
                        self.accumulate(&mut adj, x, d)?;
                    }
                    if rg(self, gy) {
                        let d = self.conv2d(x, u, &g)?;
                        self.accumulate(&mut adj, gy, d)?;
                    }
                }
                Op::Gather(src, idx) => {
                    let shape = self.shape(src).to_vec();
                    let d = self.scatter_add(u, idx, &shape)?;
                    self.accumulate(&mut adj, src, d)?;
                }
                Op::ScatterAdd(src, idx) => {
                    let shape = self.shape(src).to_vec();
                    let d = self.gather(u, idx, &shape)?;
                    self.accumulate(&mut adj, src, d)?;
                }
                Op::SoftmaxCe(s, labels) => {
                    let gs = self.softmax_ce_grad(s, labels)?;
                    let d = self.scale_by(gs, u)?;
                    self.accumulate(&mut adj, s, d)?;
                }
                Op::SoftmaxCeGrad(s) => {
                    let d = self.softmax_hvp(s, u)?;
                    self.accumulate(&mut adj, s, d)?;
                }
                Op::SoftmaxHvp(s, w) => {
                    if rg(self, s) {
                        return Err(Error::UnsupportedOrder("softmax curvature"));
                    }
                    let d = self.softmax_hvp(s, u)?;
                    self.accumulate(&mut adj, w, d)?;
                }
            }
        }

        wrt.iter()
            .map(|&id| {
                Ok(match adj.get(id.0).copied().flatten() {
                    Some(g) if self.nodes[id.0].requires_grad => g,
                    _ => self.constant(Tensor::zeros(self.shape(id))),
                })
            })
            .collect()
    }
}
