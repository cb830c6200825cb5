//! Record-on-execute reverse-mode autodiff.
//!
//! A [`Graph`] is an append-only tape: every op evaluates eagerly, stores its
//! output, and remembers its inputs. Because nodes are only ever appended,
//! the tape is already in topological order and [`Graph::backward`] is a
//! single reverse sweep that visits each node once.
//!
//! Parameters enter the tape through [`Graph::leaf`], which copies the value
//! and remembers the source tensor's address so gradients can be routed back
//! with [`Graph::param_grad`] or [`crate::module::Parameterized::accumulate_grads`].

use std::ops::Range;

use crate::error::{dim_err, Error, Result};
use crate::kernels::{gemm_nn_acc, gemm_tn_acc, transpose};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs is a `1 × n` row repeated over the rows of lhs.
    Row,
    /// rhs is an `m × 1` column repeated over the columns of lhs.
    Col,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Binary {
        a: NodeId,
        b: NodeId,
        op: BinaryOp,
        bcast: Broadcast,
    },
    Relu(NodeId),
    Softmax(NodeId),
    Transpose(NodeId),
    Slice {
        a: NodeId,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    PadCols(NodeId),
    ConcatRows(NodeId, NodeId),
    ConcatCols(Vec<NodeId>),
    Scale(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    MeanRows(NodeId),
    LayerNorm {
        a: NodeId,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// (address of source tensor, node) for every leaf that requires grad.
    params: Vec<(usize, NodeId)>,
    grads: Vec<Option<Vec<f64>>>,
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.rank() > 2 {
        return Err(Error::Contract(format!(
            "{op} expects rank <= 2, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.rows(), t.cols()))
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        id
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Records `t` on the tape. If `t` requires grad it is registered as a
    /// parameter keyed by its address; the tensor must stay in place until
    /// gradients are read back.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        let value = Tensor::new(t.shape(), t.data().to_vec()).expect("valid tensor");
        let id = self.push(value, Op::Leaf, t.requires_grad());
        if t.requires_grad() {
            self.params.push((t as *const Tensor as usize, id));
        }
        id
    }

    /// Records an owned, non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        let t = Tensor::new(&shape, t.into_data()).expect("valid tensor");
        self.push(t, Op::Leaf, false)
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

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = matrix_dims(self.value(a), "matmul")?;
        let (k2, n) = matrix_dims(self.value(b), "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn_acc(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let t = Tensor::new(&[m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose on the tape.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = matrix_dims(self.value(a), "matmul_nt")?;
        let (n, k2) = matrix_dims(self.value(b), "matmul_nt")?;
        if k != k2 {
            return Err(dim_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let bt = transpose(n, k, self.value(b).data());
        let mut out = vec![0.0; m * n];
        gemm_nn_acc(m, k, n, self.value(a).data(), &bt, &mut out);
        let t = Tensor::new(&[m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMulNt(a, b), rg))
    }

    fn broadcast_kind(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<Broadcast> {
        let ta = self.value(a);
        let tb = self.value(b);
        let (m, n) = matrix_dims(ta, op)?;
        let (bm, bn) = matrix_dims(tb, op)?;
        if ta.shape() == tb.shape() {
            Ok(Broadcast::Same)
        } else if bm == 1 && bn == n {
            Ok(Broadcast::Row)
        } else if bn == 1 && bm == m {
            Ok(Broadcast::Col)
        } else {
            Err(dim_err(op, ta.shape(), tb.shape()))
        }
    }

    /// Elementwise `a ∘ b`. `b` must match `a`'s shape or be a row/column
    /// vector that broadcasts against the matrix `a`.
    pub fn elementwise(&mut self, a: NodeId, b: NodeId, op: BinaryOp) -> Result<NodeId> {
        let bcast = self.broadcast_kind(a, b, "elementwise")?;
        let ta = self.value(a);
        let tb = self.value(b).data();
        let n = ta.cols();
        let mut out = ta.data().to_vec();
        match op {
            BinaryOp::Add => broadcast_apply(&mut out, tb, n, bcast, |x, y| x + y),
            BinaryOp::Sub => broadcast_apply(&mut out, tb, n, bcast, |x, y| x - y),
            BinaryOp::Mul => broadcast_apply(&mut out, tb, n, bcast, |x, y| x * y),
        }
        let t = Tensor::new(ta.shape(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Binary { a, b, op, bcast }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, BinaryOp::Mul)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let t = Tensor::new(ta.shape(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let (m, n) = matrix_dims(ta, "softmax_rows")?;
        let mut out = ta.data().to_vec();
        for r in 0..m {
            let row = &mut out[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let t = Tensor::new(ta.shape(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = matrix_dims(self.value(a), "transpose")?;
        let out = transpose(m, n, self.value(a).data());
        let t = Tensor::new(&[n, m], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    /// Copies the sub-block `rows × cols` of a matrix.
    pub fn slice(&mut self, a: NodeId, rows: Range<usize>, cols: Range<usize>) -> Result<NodeId> {
        let (m, n) = matrix_dims(self.value(a), "slice")?;
        for (r, bound) in [(&rows, m), (&cols, n)] {
            if r.start >= r.end {
                return Err(Error::Index {
                    op: "slice",
                    index: r.start,
                    bound: r.end,
                });
            }
            if r.end > bound {
                return Err(Error::Index {
                    op: "slice",
                    index: r.end - 1,
                    bound,
                });
            }
        }
        let src = self.value(a).data();
        let width = cols.len();
        let mut out = Vec::with_capacity(rows.len() * width);
        for r in rows.clone() {
            out.extend_from_slice(&src[r * n + cols.start..r * n + cols.end]);
        }
        let t = Tensor::new(&[rows.len(), width], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Slice { a, rows, cols }, rg))
    }

    pub fn slice_cols(&mut self, a: NodeId, cols: Range<usize>) -> Result<NodeId> {
        let m = matrix_dims(self.value(a), "slice_cols")?.0;
        self.slice(a, 0..m, cols)
    }

    pub fn slice_rows(&mut self, a: NodeId, rows: Range<usize>) -> Result<NodeId> {
        let n = matrix_dims(self.value(a), "slice_rows")?.1;
        self.slice(a, rows, 0..n)
    }

    /// Right-pads every row with zeros up to `width` columns.
    pub fn pad_cols(&mut self, a: NodeId, width: usize) -> Result<NodeId> {
        let (m, n) = matrix_dims(self.value(a), "pad_cols")?;
        if width < n {
            return Err(Error::Index {
                op: "pad_cols",
                index: n,
                bound: width,
            });
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; m * width];
        for r in 0..m {
            out[r * width..r * width + n].copy_from_slice(&src[r * n..(r + 1) * n]);
        }
        let t = Tensor::new(&[m, width], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::PadCols(a), rg))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ma, na) = matrix_dims(self.value(a), "concat_rows")?;
        let (mb, nb) = matrix_dims(self.value(b), "concat_rows")?;
        if na != nb {
            return Err(dim_err("concat_rows", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        let t = Tensor::new(&[ma + mb, na], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::ConcatRows(a, b), rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let m = matrix_dims(self.value(first), "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = matrix_dims(self.value(p), "concat_cols")?;
            if pm != m {
                return Err(dim_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(&[m, total], out)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(ta.shape(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let s: f64 = ta.data().iter().sum::<f64>() / ta.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Column means: `[m × n] -> [1 × n]`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = matrix_dims(self.value(a), "mean_rows")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(&src[r * n..(r + 1) * n]) {
                *o += v;
            }
        }
        let inv = 1.0 / m as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let t = Tensor::new(&[1, n], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::MeanRows(a), rg))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = matrix_dims(self.value(a), "layer_norm_rows")?;
        let mut out = self.value(a).data().to_vec();
        let mut inv_std = Vec::with_capacity(m);
        for r in 0..m {
            let row = &mut out[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mu) * is;
            }
            inv_std.push(is);
        }
        let t = Tensor::new(&[m, n], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::LayerNorm { a, inv_std }, rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy_logits(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (b, c) = matrix_dims(self.value(logits), "cross_entropy_logits")?;
        if labels.len() != b {
            return Err(dim_err("cross_entropy_logits", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index {
                op: "cross_entropy_logits",
                index: bad,
                bound: c,
            });
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &src[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            for (p, x) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            loss += lse - row[label];
        }
        loss /= b as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients from a previous call are
    /// discarded.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, delta: Vec<f64>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&delta) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn acc_with(
        &self,
        grads: &mut [Option<Vec<f64>>],
        id: NodeId,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let n = self.nodes[id.0].value.numel();
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                self.acc_with(grads, *a, |ga| {
                    let bt = transpose(k, n, tb.data());
                    gemm_nn_acc(m, n, k, g, &bt, ga);
                });
                self.acc_with(grads, *b, |gb| gemm_tn_acc(m, k, n, ta.data(), g, gb));
            }
            Op::MatMulNt(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.rows();
                self.acc_with(grads, *a, |ga| gemm_nn_acc(m, n, k, g, tb.data(), ga));
                self.acc_with(grads, *b, |gb| gemm_tn_acc(m, n, k, g, ta.data(), gb));
            }
            Op::Binary { a, b, op, bcast } => {
                let ta = self.value(*a).data();
                let tb = self.value(*b).data();
                let n = out.cols();
                match op {
                    BinaryOp::Add | BinaryOp::Sub => self.acc(grads, *a, g.to_vec()),
                    BinaryOp::Mul => {
                        let mut d = g.to_vec();
                        broadcast_apply(&mut d, tb, n, *bcast, |gv, y| gv * y);
                        self.acc(grads, *a, d);
                    }
                }
                let sign = if *op == BinaryOp::Sub { -1.0 } else { 1.0 };
                self.acc_with(grads, *b, |gb| match op {
                    BinaryOp::Mul => broadcast_reduce(gb, g, ta, n, *bcast),
                    _ => broadcast_reduce(gb, g, &vec![sign; g.len()], n, *bcast),
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.acc(grads, *a, d);
            }
            Op::Softmax(a) => {
                let (m, n) = (out.rows(), out.cols());
                let y = out.data();
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    let ys = &y[r * n..(r + 1) * n];
                    let gs = &g[r * n..(r + 1) * n];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[r * n + j] = ys[j] * (gs[j] - dot);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::Transpose(a) => {
                let d = transpose(out.rows(), out.cols(), g);
                self.acc(grads, *a, d);
            }
            Op::Slice { a, rows, cols } => {
                let n = self.value(*a).cols();
                let w = cols.len();
                self.acc_with(grads, *a, |ga| {
                    for (ri, r) in rows.clone().enumerate() {
                        for (dst, src) in ga[r * n + cols.start..r * n + cols.end]
                            .iter_mut()
                            .zip(&g[ri * w..(ri + 1) * w])
                        {
                            *dst += src;
                        }
                    }
                });
            }
            Op::PadCols(a) => {
                let ta = self.value(*a);
                let (m, n) = (ta.rows(), ta.cols());
                let w = out.cols();
                let mut d = Vec::with_capacity(m * n);
                for r in 0..m {
                    d.extend_from_slice(&g[r * w..r * w + n]);
                }
                self.acc(grads, *a, d);
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).numel();
                self.acc(grads, *a, g[..split].to_vec());
                self.acc(grads, *b, g[split..].to_vec());
            }
            Op::ConcatCols(parts) => {
                let m = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    let mut d = Vec::with_capacity(m * w);
                    for r in 0..m {
                        d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    self.acc(grads, *p, d);
                    offset += w;
                }
            }
            Op::Scale(a, c) => {
                let d = g.iter().map(|v| v * c).collect();
                self.acc(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.acc(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.acc(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::MeanRows(a) => {
                let ta = self.value(*a);
                let m = ta.rows();
                let inv = 1.0 / m as f64;
                let row: Vec<f64> = g.iter().map(|v| v * inv).collect();
                let d = row.iter().copied().cycle().take(ta.numel()).collect();
                self.acc(grads, *a, d);
            }
            Op::LayerNorm { a, inv_std } => {
                let (m, n) = (out.rows(), out.cols());
                let y = out.data();
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    let ys = &y[r * n..(r + 1) * n];
                    let gs = &g[r * n..(r + 1) * n];
                    let mean_g = gs.iter().sum::<f64>() / n as f64;
                    let mean_gy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        d[r * n + j] = inv_std[r] * (gs[j] - mean_g - ys[j] * mean_gy);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let scale = g[0] / labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * c + l] -= scale;
                }
                self.acc(grads, *logits, d);
            }
        }
    }

    /// Gradient of the last `backward` loss w.r.t. `id`. Nodes that require
    /// grad but were not reached report zeros.
    pub fn grad(&self, id: NodeId) -> Option<Vec<f64>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        match self.grads.get(id.0) {
            Some(Some(g)) => Some(g.clone()),
            _ => Some(vec![0.0; self.nodes[id.0].value.numel()]),
        }
    }

    /// Total gradient for a parameter tensor recorded through [`Graph::leaf`],
    /// summed over every time it was recorded. `None` if it never was.
    pub fn param_grad(&self, t: &Tensor) -> Option<Vec<f64>> {
        let addr = t as *const Tensor as usize;
        let mut total: Option<Vec<f64>> = None;
        for &(a, id) in &self.params {
            if a != addr {
                continue;
            }
            let g = self.grad(id).expect("params require grad");
            match &mut total {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
                None => total = Some(g),
            }
        }
        total
    }
}

/// `out[j] = f(out[j], b[bidx(j)])` for the given broadcast of `b`.
#[inline(always)]
fn broadcast_apply(out: &mut [f64], b: &[f64], n: usize, bcast: Broadcast, f: impl Fn(f64, f64) -> f64) {
    match bcast {
        Broadcast::Same => out.iter_mut().zip(b).for_each(|(x, &y)| *x = f(*x, y)),
        Broadcast::Row => {
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(b).for_each(|(x, &y)| *x = f(*x, y));
            }
        }
        Broadcast::Col => {
            for (row, &y) in out.chunks_mut(n).zip(b) {
                row.iter_mut().for_each(|x| *x = f(*x, y));
            }
        }
    }
}

/// `gb[bidx(j)] += g[j] · local[j]`, visiting `j` in ascending order.
fn broadcast_reduce(gb: &mut [f64], g: &[f64], local: &[f64], n: usize, bcast: Broadcast) {
    match bcast {
        Broadcast::Same => {
            for ((x, gv), l) in gb.iter_mut().zip(g).zip(local) {
                *x += gv * l;
            }
        }
        Broadcast::Row => {
            for (gr, lr) in g.chunks(n).zip(local.chunks(n)) {
                for ((x, gv), l) in gb.iter_mut().zip(gr).zip(lr) {
                    *x += gv * l;
                }
            }
        }
        Broadcast::Col => {
            for ((x, gr), lr) in gb.iter_mut().zip(g.chunks(n)).zip(local.chunks(n)) {
                for (gv, l) in gr.iter().zip(lr) {
                    *x += gv * l;
                }
            }
        }
    }
}
