//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every op applied during one forward pass. Parameters
//! enter by reference (no copies of embedding tables), and [`Graph::backward`]
//! walks the tape in reverse, accumulating parameter gradients into a
//! [`ParamGrads`] buffer that can be shared across many graphs in a batch.

use std::borrow::Cow;
use std::collections::HashMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamGrads;
use super::tensor::{log_sum_exp, softmax_in_place, Tensor};
use super::NumericsError;

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gelu(NodeId),
    Softmax(NodeId),
    LogSumExp(NodeId),
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    Transpose(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        probs: Tensor,
    },
    SumAll(NodeId),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

/// One forward pass worth of recorded ops.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    param_nodes: HashMap<usize, NodeId>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    /// Graph in evaluation mode: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            dropout_rng: None,
        }
    }

    /// Graph in training mode: dropout masks are drawn from `rng`.
    pub fn with_dropout(rng: ChaCha8Rng) -> Self {
        Self {
            dropout_rng: Some(rng),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite output from {op:?}");
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Registers a parameter tensor by reference. Repeated calls with the same
    /// slot return the same node.
    pub fn param(&mut self, slot: usize, value: &'a Tensor) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&slot) {
            return id;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Param(slot),
        });
        let id = self.nodes.len() - 1;
        self.param_nodes.insert(slot, id);
        id
    }

    fn shape_err(&self, op: &'static str, a: NodeId, b: NodeId) -> NumericsError {
        self.value(a).shape_err(op, self.value(b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a × bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds a `[1 × n]` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, NumericsError> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(self.shape_err("add_row", a, row));
        }
        let mut v = x.clone();
        for i in 0..v.rows() {
            for (o, b) in v.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (x, y) = (self.value(a), self.value(b));
        if !x.same_shape(y) {
            return Err(self.shape_err("mul", a, b));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let v = Tensor::new(x.rows(), x.cols(), data)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    /// Row gather (`embedding_lookup`): output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, NumericsError> {
        let t = self.value(table);
        let mut v = Tensor::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            if id >= t.rows() {
                return Err(NumericsError::Index {
                    op: "gather",
                    index: id,
                    bound: t.rows(),
                });
            }
            v.row_mut(i).copy_from_slice(t.row(id));
        }
        Ok(self.push(
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Row-wise layer norm with affine gain `gamma` and shift `beta` (`[1 × n]`).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId, NumericsError> {
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let n = xv.cols();
        if g.rows() != 1 || g.cols() != n || !g.same_shape(b) {
            return Err(self.shape_err("layer_norm", x, gamma));
        }
        let mut xhat = Tensor::zeros(xv.rows(), n);
        let mut out = Tensor::zeros(xv.rows(), n);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            let o = out.row_mut(r);
            for c in 0..n {
                o[c] = xhat.get(r, c) * g.data()[c] + b.data()[c];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu(x))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).softmax_rows();
        self.push(v, Op::Softmax(x))
    }

    /// `[rows × 1]` of per-row log-sum-exp.
    pub fn log_sum_exp_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).log_sum_exp_rows();
        self.push(v, Op::LogSumExp(x))
    }

    /// Inverted dropout. Identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> NodeId {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.nodes[x].value.len();
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let v = Tensor::new(xv.rows(), xv.cols(), data).expect("same shape");
        self.push(v, Op::Dropout { x, mask })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        let Some(&first) = parts.first() else {
            return Err(NumericsError::Empty("concat_cols"));
        };
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(self.shape_err("concat_cols", first, p));
            }
            cols += self.value(p).cols();
        }
        let mut v = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                v.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, NumericsError> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(NumericsError::Index {
                op: "slice_cols",
                index: start + len,
                bound: xv.cols(),
            });
        }
        let mut v = Tensor::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            v.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        Ok(self.push(v, Op::SliceCols { x, start }))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, NumericsError> {
        let xv = self.value(x);
        if start + len > xv.rows() {
            return Err(NumericsError::Index {
                op: "slice_rows",
                index: start + len,
                bound: xv.rows(),
            });
        }
        let c = xv.cols();
        let v = Tensor::new(len, c, xv.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(v, Op::SliceRows { x, start }))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).transpose();
        self.push(v, Op::Transpose(x))
    }

    /// Mean cross-entropy over rows whose target is `Some`; 0 when none are.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[Option<usize>]) -> Result<NodeId, NumericsError> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() {
            return Err(NumericsError::Shape {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = lv.clone();
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let row = lv.row(r);
            if let Some(t) = *t {
                if t >= row.len() {
                    return Err(NumericsError::Index {
                        op: "cross_entropy",
                        index: t,
                        bound: row.len(),
                    });
                }
                total += log_sum_exp(row) - row[t];
                count += 1;
            }
            softmax_in_place(probs.row_mut(r));
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::SumAll(x))
    }

    /// Reverse pass from `root`, seeded with `seed` (same shape as the root).
    ///
    /// Parameter gradients are added into `params` when given; gathers from a
    /// parameter table write straight into the buffer's rows.
    pub fn backward(
        &self,
        root: NodeId,
        seed: Tensor,
        mut params: Option<&mut ParamGrads>,
    ) -> Result<NodeGrads, NumericsError> {
        if !seed.same_shape(self.value(root)) {
            return Err(seed.shape_err("backward seed", self.value(root)));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(seed);
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Param(slot) => {
                    if let Some(p) = params.as_deref_mut() {
                        p.add(*slot, &g)?;
                    }
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b))?;
                    let db = self.value(*a).t_matmul(&g)?;
                    accum(&mut grads, *a, da)?;
                    accum(&mut grads, *b, db)?;
                }
                Op::MatMulT(a, b) => {
                    let da = g.matmul(self.value(*b))?;
                    let db = g.t_matmul(self.value(*a))?;
                    accum(&mut grads, *a, da)?;
                    accum(&mut grads, *b, db)?;
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *a, g.clone())?;
                    accum(&mut grads, *b, g.clone())?;
                }
                Op::AddRow(a, row) => {
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accum(&mut grads, *a, g.clone())?;
                    accum(&mut grads, *row, db)?;
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da: Vec<f64> = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    let db: Vec<f64> = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    accum(&mut grads, *a, Tensor::new(g.rows(), g.cols(), da)?)?;
                    accum(&mut grads, *b, Tensor::new(g.rows(), g.cols(), db)?)?;
                }
                Op::Scale(a, c) => accum(&mut grads, *a, g.scale(*c))?,
                Op::Gather { table, ids } => {
                    let direct = match (&self.nodes[*table].op, params.as_deref_mut()) {
                        (Op::Param(slot), Some(p)) => {
                            p.add_rows(*slot, ids, &g)?;
                            true
                        }
                        _ => false,
                    };
                    if !direct {
                        let tv = self.value(*table);
                        let mut dt = Tensor::zeros(tv.rows(), tv.cols());
                        for (i, &r) in ids.iter().enumerate() {
                            for (o, v) in dt.row_mut(r).iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                        accum(&mut grads, *table, dt)?;
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    let n = g.cols();
                    let mut dx = Tensor::zeros(g.rows(), n);
                    let mut dgamma = Tensor::zeros(1, n);
                    let mut dbeta = Tensor::zeros(1, n);
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let xh = xhat.row(r);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..n {
                            let dxh = gr[c] * gv.data()[c];
                            mean_d += dxh;
                            mean_dx += dxh * xh[c];
                            dgamma.data_mut()[c] += gr[c] * xh[c];
                            dbeta.data_mut()[c] += gr[c];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        let out = dx.row_mut(r);
                        for c in 0..n {
                            let dxh = gr[c] * gv.data()[c];
                            out[c] = inv_std[r] * (dxh - mean_d - xh[c] * mean_dx);
                        }
                    }
                    accum(&mut grads, *x, dx)?;
                    accum(&mut grads, *gamma, dgamma)?;
                    accum(&mut grads, *beta, dbeta)?;
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let d: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gg, &v)| gg * gelu_grad(v))
                        .collect();
                    accum(&mut grads, *x, Tensor::new(g.rows(), g.cols(), d)?)?;
                }
                Op::Softmax(x) => {
                    let y = self.value(id);
                    let mut dx = Tensor::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, (a, b)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = a * (b - s);
                        }
                    }
                    accum(&mut grads, *x, dx)?;
                }
                Op::LogSumExp(x) => {
                    let mut dx = self.value(*x).softmax_rows();
                    for r in 0..dx.rows() {
                        let gr = g.get(r, 0);
                        for v in dx.row_mut(r) {
                            *v *= gr;
                        }
                    }
                    accum(&mut grads, *x, dx)?;
                }
                Op::Dropout { x, mask } => {
                    let d: Vec<f64> = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                    accum(&mut grads, *x, Tensor::new(g.rows(), g.cols(), d)?)?;
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut dp = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        accum(&mut grads, p, dp)?;
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accum(&mut grads, *x, dx)?;
                }
                Op::SliceRows { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        dx.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    accum(&mut grads, *x, dx)?;
                }
                Op::Transpose(x) => accum(&mut grads, *x, g.transpose())?,
                Op::CrossEntropy { logits, targets, probs } => {
                    let count = targets.iter().filter(|t| t.is_some()).count();
                    let mut dl = Tensor::zeros(probs.rows(), probs.cols());
                    if count > 0 {
                        let s = g.get(0, 0) / count as f64;
                        for (r, t) in targets.iter().enumerate() {
                            if let Some(t) = *t {
                                for (o, p) in dl.row_mut(r).iter_mut().zip(probs.row(r)) {
                                    *o = s * p;
                                }
                                dl.row_mut(r)[t] -= s;
                            }
                        }
                    }
                    accum(&mut grads, *logits, dl)?;
                }
                Op::SumAll(x) => {
                    let xv = self.value(*x);
                    accum(&mut grads, *x, Tensor::filled(xv.rows(), xv.cols(), g.get(0, 0)))?;
                }
            }
            grads[id] = Some(g);
        }
        Ok(NodeGrads { grads })
    }
}

fn accum(grads: &mut [Option<Tensor>], id: NodeId, t: Tensor) -> Result<(), NumericsError> {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => {
            *slot = Some(t);
            Ok(())
        }
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct NodeGrads {
    grads: Vec<Option<Tensor>>,
}

impl NodeGrads {
    /// Gradient with respect to a node, if it lies on a path to the root.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(Option::as_ref)
    }
}

const GELU_C: f64 = 0.044715;

pub fn gelu(x: f64) -> f64 {
    let k = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (k * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let k = (2.0 / PI).sqrt();
    let t = (k * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
}
