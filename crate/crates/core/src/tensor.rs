//! Dense f32 tensors and a tape-based reverse-mode autodiff graph.
//!
//! Every op appends a node to a [`Graph`]. Node values are immutable once
//! recorded; [`Graph::backward`] walks the tape in reverse insertion order,
//! which is always a valid reverse-mode schedule because inputs are recorded
//! before the ops that consume them.
//!
//! Reductions (layer-norm statistics, the cross-entropy loss) accumulate in
//! f64. Nothing here is threaded, so identical inputs always give bit-identical
//! outputs.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Row-major f32 tensor. The data buffer is shared copy-on-write, so binding a
/// parameter into a graph does not copy it.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {:?} holds {} values but {} were given",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![0.0; numel]),
        }
    }

    pub fn scalar(v: f32) -> Self {
        Self {
            shape: vec![],
            data: Arc::new(vec![v]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    Sum(NodeId),
    Gelu {
        x: NodeId,
        tanh: Vec<f32>,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        // (normalized input, per-row 1/std)
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: Vec<usize>,
        n_heads: usize,
        probs: Vec<f32>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<u32>,
        mask: Vec<bool>,
        probs: Vec<f32>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Vec<f32>>,
}

/// The computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
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

    /// Leaf that receives a gradient on backward.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(t, true, Op::Leaf)
    }

    /// Leaf with no gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, false, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of a `requires_grad` node after [`Graph::backward`]. Nodes the
    /// loss does not reach get an all-zero buffer.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    fn matrix_dims(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(id).shape();
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = self.matrix_dims(a, "matmul")?;
        let (k2, m) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut out = vec![0.0f32; n * m];
        matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, rg, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let out: Vec<f32> = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Add(a, b)))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.cols();
        if vb.numel() != c || vx.shape().is_empty() {
            return Err(Error::shape("add_bias", vx.shape(), vb.shape()));
        }
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let shape = vx.shape().to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::AddBias(x, bias)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", va.shape(), vb.shape()));
        }
        let out: Vec<f32> = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, s: f32) -> Result<NodeId> {
        let vx = self.value(x);
        let out: Vec<f32> = vx.data().iter().map(|v| v * s).collect();
        let shape = vx.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Scale(x, s)))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s as f32), rg, Op::Sum(x)))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let tanh: Vec<f32> = vx.data().iter().map(|&v| gelu_tanh(v)).collect();
        let out: Vec<f32> = vx.data().iter().zip(&tanh).map(|(&v, &t)| 0.5 * v * (1.0 + t)).collect();
        let shape = vx.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Gelu { x, tanh }))
    }

    /// Normalizes each row of `x` to zero mean and unit variance, then applies
    /// `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f32) -> Result<NodeId> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let c = vx.cols();
        if vg.numel() != c || vb.numel() != c || vx.shape().is_empty() {
            return Err(Error::shape("layer_norm", vx.shape(), vg.shape()));
        }
        let rows = vx.numel() / c;
        let mut xhat = vec![0.0f32; vx.numel()];
        let mut rstd = vec![0.0f32; rows];
        let mut out = vec![0.0f32; vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * c..(r + 1) * c];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / c as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for j in 0..c {
                let h = ((row[j] as f64 - mean) * rs) as f32;
                xhat[r * c + j] = h;
                out[r * c + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let shape = vx.shape().to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Row lookup: output row i is `table[ids[i]]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.matrix_dims(table, "gather")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::InvalidArgument(format!(
                    "gather index {id} out of range for table of {v} rows"
                )));
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_rows of nothing".into()))?;
        let (_, c) = self.matrix_dims(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.matrix_dims(p, "concat_rows")?;
            if pc != c {
                return Err(Error::shape("concat_rows", self.value(first).shape(), self.value(p).shape()));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![rows, c], out)?, rg, Op::ConcatRows(parts.to_vec())))
    }

    /// Causal multi-head self-attention over independent row segments.
    ///
    /// `q`, `k`, `v` are `(rows, d)` with `rows = segments.iter().sum()`. Rows
    /// of one segment attend only to earlier-or-equal rows of the same
    /// segment. Head `h` uses columns `h*d/n_heads .. (h+1)*d/n_heads`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: &[usize],
        n_heads: usize,
    ) -> Result<NodeId> {
        let (rows, d) = self.matrix_dims(q, "attention")?;
        for other in [k, v] {
            if self.value(other).shape() != self.value(q).shape() {
                return Err(Error::shape("attention", self.value(q).shape(), self.value(other).shape()));
            }
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::InvalidArgument(format!("{d} features not divisible into {n_heads} heads")));
        }
        if segments.iter().sum::<usize>() != rows {
            return Err(Error::InvalidArgument(format!(
                "segments sum to {} but attention input has {rows} rows",
                segments.iter().sum::<usize>()
            )));
        }
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0f32; rows * d];
        let mut probs = Vec::with_capacity(segments.iter().map(|n| n * n).sum::<usize>() * n_heads);
        let mut off = 0;
        for &n in segments {
            for h in 0..n_heads {
                let c0 = h * dh;
                for i in 0..n {
                    let qi = &qd[(off + i) * d + c0..(off + i) * d + c0 + dh];
                    let mut row = vec![0.0f32; n];
                    let mut mx = f32::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &kd[(off + j) * d + c0..(off + j) * d + c0 + dh];
                        let s = dot(qi, kj) * scale;
                        row[j] = s;
                        mx = mx.max(s);
                    }
                    let mut z = 0.0f32;
                    for s in row.iter_mut().take(i + 1) {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    for s in row.iter_mut().take(i + 1) {
                        *s /= z;
                    }
                    let oi = &mut out[(off + i) * d + c0..(off + i) * d + c0 + dh];
                    for j in 0..=i {
                        let p = row[j];
                        let vj = &vd[(off + j) * d + c0..(off + j) * d + c0 + dh];
                        for (o, &vv) in oi.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                    probs.extend_from_slice(&row);
                }
            }
            off += n;
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            rg,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                n_heads,
                probs,
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, over rows where `mask` is true.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[u32], mask: &[bool]) -> Result<NodeId> {
        let (rows, v) = self.matrix_dims(logits, "softmax_cross_entropy")?;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::InvalidArgument(format!(
                "cross entropy over {rows} rows got {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0f32; rows * v];
        let mut total = 0.0f64;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let t = targets[r] as usize;
            if t >= v {
                return Err(Error::InvalidArgument(format!("target {t} out of range for {v} classes")));
            }
            let row = &ld[r * v..(r + 1) * v];
            let mx = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let z: f64 = row.iter().map(|&x| (x as f64 - mx).exp()).sum();
            let lse = mx + z.ln();
            total += lse - row[t] as f64;
            for j in 0..v {
                probs[r * v + j] = ((row[j] as f64 - lse).exp()) as f32;
            }
        }
        let loss = (total / count as f64) as f32;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`. A graph can be swept once.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::Backward("tape already consumed by a previous backward".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.nodes[idx].grad = Some(g);
            }
        }
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (n, k) = (va.shape()[0], va.shape()[1]);
                let m = vb.shape()[1];
                if wants(*a) {
                    let da = acc(grads, *a, n * k);
                    matmul_nt_acc(g, vb.data(), da, n, m, k);
                }
                if wants(*b) {
                    let db = acc(grads, *b, k * m);
                    matmul_tn_acc(va.data(), g, db, n, k, m);
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if wants(id) {
                        add_into(acc(grads, id, g.len()), g);
                    }
                }
            }
            Op::AddBias(x, b) => {
                if wants(*x) {
                    add_into(acc(grads, *x, g.len()), g);
                }
                if wants(*b) {
                    let c = self.value(*b).numel();
                    let db = acc(grads, *b, c);
                    for row in g.chunks(c) {
                        add_into(db, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if wants(*a) {
                    let da = acc(grads, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * vb[i];
                    }
                }
                if wants(*b) {
                    let db = acc(grads, *b, g.len());
                    for i in 0..g.len() {
                        db[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale(x, s) => {
                let dx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    dx[i] += g[i] * s;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                let dx = acc(grads, *x, n);
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
            Op::Gelu { x, tanh } => {
                let vx = self.value(*x).data();
                let dx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    dx[i] += g[i] * gelu_grad(vx[i], tanh[i]);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = self.value(*gain).numel();
                let rows = g.len() / c;
                let gd = self.value(*gain).data();
                if wants(*gain) {
                    let dg = acc(grads, *gain, c);
                    for r in 0..rows {
                        for j in 0..c {
                            dg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if wants(*bias) {
                    let db = acc(grads, *bias, c);
                    for row in g.chunks(c) {
                        add_into(db, row);
                    }
                }
                if wants(*x) {
                    let dx = acc(grads, *x, g.len());
                    let mut dxhat = vec![0.0f32; c];
                    for r in 0..rows {
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for j in 0..c {
                            let d = g[r * c + j] * gd[j];
                            dxhat[j] = d;
                            m1 += d as f64;
                            m2 += (d * xhat[r * c + j]) as f64;
                        }
                        let m1 = (m1 / c as f64) as f32;
                        let m2 = (m2 / c as f64) as f32;
                        for j in 0..c {
                            dx[r * c + j] += rstd[r] * (dxhat[j] - m1 - xhat[r * c + j] * m2);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let vt = self.value(*table);
                let d = vt.cols();
                let dt = acc(grads, *table, vt.numel());
                for (i, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if wants(p) {
                        add_into(acc(grads, p, n), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                n_heads,
                probs,
            } => {
                let (rows, d) = (self.value(*q).shape()[0], self.value(*q).shape()[1]);
                let dh = d / n_heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![0.0f32; rows * d];
                let mut dk = vec![0.0f32; rows * d];
                let mut dv = vec![0.0f32; rows * d];
                let mut off = 0;
                let mut poff = 0;
                for &n in segments {
                    for h in 0..*n_heads {
                        let c0 = h * dh;
                        for i in 0..n {
                            let p = &probs[poff + i * n..poff + i * n + n];
                            let gi = &g[(off + i) * d + c0..(off + i) * d + c0 + dh];
                            // dP_ij = dO_i . V_j ; dS = P * (dP - sum_j P dP)
                            let mut dp = vec![0.0f32; i + 1];
                            let mut inner = 0.0f32;
                            for j in 0..=i {
                                let vj = &vd[(off + j) * d + c0..(off + j) * d + c0 + dh];
                                dp[j] = dot(gi, vj);
                                inner += p[j] * dp[j];
                                let dvj = &mut dv[(off + j) * d + c0..(off + j) * d + c0 + dh];
                                for (o, &gg) in dvj.iter_mut().zip(gi) {
                                    *o += p[j] * gg;
                                }
                            }
                            let qi = &qd[(off + i) * d + c0..(off + i) * d + c0 + dh];
                            for j in 0..=i {
                                let ds = p[j] * (dp[j] - inner) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &kd[(off + j) * d + c0..(off + j) * d + c0 + dh];
                                let dqi = &mut dq[(off + i) * d + c0..(off + i) * d + c0 + dh];
                                for (o, &kk) in dqi.iter_mut().zip(kj) {
                                    *o += ds * kk;
                                }
                                let dkj = &mut dk[(off + j) * d + c0..(off + j) * d + c0 + dh];
                                for (o, &qq) in dkj.iter_mut().zip(qi) {
                                    *o += ds * qq;
                                }
                            }
                        }
                        poff += n * n;
                    }
                    off += n;
                }
                for (id, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if wants(id) {
                        add_into(acc(grads, id, rows * d), &buf);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = self.value(*logits).cols();
                let rows = mask.len();
                let dl = acc(grads, *logits, rows * v);
                let s = g[0] / *count as f32;
                for r in 0..rows {
                    if !mask[r] {
                        continue;
                    }
                    let t = targets[r] as usize;
                    for j in 0..v {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dl[r * v + j] += (probs[r * v + j] - onehot) * s;
                    }
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f32>>], id: NodeId, len: usize) -> &mut [f32] {
    grads[id.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice()
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn gelu_tanh(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    // tanh through one exp; libm's tanhf is several times slower
    let e = (-2.0 * u.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(u)
}

fn gelu_grad(x: f32, t: f32) -> f32 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// c (n×m) = a (n×k) · b (k×m)
pub(crate) fn matmul_nn(a: &[f32], b: &[f32], c: &mut [f32], n: usize, k: usize, m: usize) {
    gemm(a, (k, 1), b, (m, 1), c, n, k, m, 0.0);
}

/// c (n×k) += g (n×m) · bᵀ where b is (k×m)
fn matmul_nt_acc(g: &[f32], b: &[f32], c: &mut [f32], n: usize, m: usize, k: usize) {
    gemm(g, (m, 1), b, (1, m), c, n, m, k, 1.0);
}

/// c (k×m) += aᵀ · g where a is (n×k), g is (n×m)
fn matmul_tn_acc(a: &[f32], g: &[f32], c: &mut [f32], n: usize, k: usize, m: usize) {
    gemm(a, (1, k), g, (m, 1), c, k, n, m, 1.0);
}

/// c (rows×cols) = beta·c + a (rows×inner) · b (inner×cols), with a and b
/// given as (row stride, column stride) views.
#[allow(clippy::too_many_arguments)]
fn gemm(a: &[f32], sa: (usize, usize), b: &[f32], sb: (usize, usize), c: &mut [f32], rows: usize, inner: usize, cols: usize, beta: f32) {
    assert!(a.len() >= rows * inner && b.len() >= inner * cols && c.len() >= rows * cols);
    if rows == 0 || cols == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the strided views touch.
    unsafe {
        matrixmultiply::sgemm(
            rows,
            inner,
            cols,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            cols as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(g: &mut Graph, rows: usize, cols: usize, data: &[f32]) -> NodeId {
        g.param(Tensor::new(vec![rows, cols], data.to_vec()).unwrap())
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let eye = mat(&mut g, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let m = mat(&mut g, 2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(out).data(), g.value(m).data());

        let a = mat(&mut g, 1, 2, &[1.0, 2.0]);
        let b = mat(&mut g, 2, 1, &[3.0, 4.0]);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 1]);
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = mat(&mut g, 2, 3, &[0.0; 6]);
        let b = mat(&mut g, 2, 3, &[0.0; 6]);
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn layer_norm_constant_row_and_normalized_row() {
        let mut g = Graph::new();
        let x = mat(&mut g, 1, 4, &[3.0; 4]);
        let gain = g.constant(Tensor::new(vec![4], vec![1.0; 4]).unwrap());
        let bias = g.constant(Tensor::zeros(vec![4]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let x = mat(&mut g, 1, 2, &[1.0, -1.0]);
        let gain = g.constant(Tensor::new(vec![2], vec![1.0; 2]).unwrap());
        let bias = g.constant(Tensor::zeros(vec![2]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-6 && (d[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_rejects_nonpositive_eps() {
        let mut g = Graph::new();
        let x = mat(&mut g, 1, 2, &[1.0, 2.0]);
        let gain = g.constant(Tensor::new(vec![2], vec![1.0; 2]).unwrap());
        let bias = g.constant(Tensor::zeros(vec![2]));
        assert!(g.layer_norm(x, gain, bias, 0.0).is_err());
        assert!(g.layer_norm(x, gain, bias, -1.0).is_err());
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let mut g = Graph::new();
        let logits = mat(&mut g, 1, 10, &[0.5; 10]);
        let l = g.softmax_cross_entropy(logits, &[3], &[true]).unwrap();
        assert!((g.value(l).item() - (10f32).ln()).abs() < 1e-6);

        let mut row = vec![0.0; 10];
        row[7] = 1e4;
        let logits = mat(&mut g, 1, 10, &row);
        let l = g.softmax_cross_entropy(logits, &[7], &[true]).unwrap();
        assert!(g.value(l).item().abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_all_masked_is_empty_loss() {
        let mut g = Graph::new();
        let logits = mat(&mut g, 2, 3, &[0.0; 6]);
        let err = g.softmax_cross_entropy(logits, &[0, 1], &[false, false]).unwrap_err();
        assert!(matches!(err, Error::EmptyLoss));
        assert!(err.to_string().contains("empty loss"));
    }

    #[test]
    fn backward_sum_and_square() {
        let mut g = Graph::new();
        let x = mat(&mut g, 2, 2, &[1.0, -2.0, 3.0, 0.5]);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);

        let mut g = Graph::new();
        let x = mat(&mut g, 1, 3, &[1.0, -2.0, 3.0]);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_nonscalar_and_second_sweep() {
        let mut g = Graph::new();
        let x = mat(&mut g, 1, 2, &[1.0, 2.0]);
        assert!(g.backward(x).is_err());
        let mut g = Graph::new();
        let x = mat(&mut g, 1, 2, &[1.0, 2.0]);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(g.backward(s).is_err());
    }

    #[test]
    fn unreached_params_get_exact_zero_grads() {
        let mut g = Graph::new();
        let x = mat(&mut g, 1, 2, &[1.0, 2.0]);
        let unused = mat(&mut g, 1, 2, &[5.0, 6.0]);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        let z = g.grad(unused).unwrap();
        assert!(z.iter().all(|v| v.to_bits() == 0));
    }

    #[test]
    fn tensor_rejects_bad_numel() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }
}
