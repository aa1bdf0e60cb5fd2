//! Reverse-mode differentiation over a Wengert tape of op-level nodes.
//!
//! The node set is deliberately small (matmul, softmax, rmsnorm, geglu, add,
//! concat/slice, embed lookup, relative-position bias, cross-entropy) so each
//! manual adjoint stays auditable. Parameters enter a graph through
//! [`Tape::leaf`]; only leaves registered from trainable tensors ever receive
//! an entry in the [`GradientRecord`] — freezing is enforced structurally, not
//! by zeroing afterwards.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Tensor, TensorId};

pub const RMSNORM_EPS: f64 = 1e-6;
const GELU_CUBIC: f64 = 0.044715;
/// Large negative logit used to mask attention; exp() underflows to exactly 0.
const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    MatMul { a: NodeId, b: NodeId },
    /// a · bᵀ with b stored row-major as [n × k].
    MatMulNt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    MulConst { a: NodeId, c: T },
    SumAll { a: NodeId },
    ConcatRows { a: NodeId, b: NodeId },
    SliceCols { a: NodeId, start: usize, width: usize },
    ConcatCols { parts: Vec<NodeId> },
    SoftmaxRows { a: NodeId },
    RmsNorm { x: NodeId, gain: NodeId },
    Geglu { x: NodeId, w_in: NodeId, w_out: NodeId },
    Embed { table: NodeId, ids: Vec<u32> },
    RelBias { table: NodeId, buckets: Vec<u32>, rows: usize, cols: usize, head: usize, causal: bool },
    CrossEntropy { logits: NodeId, targets: Vec<u32> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    leaf: Option<LeafInfo>,
}

#[derive(Debug, Clone, Copy)]
struct LeafInfo {
    source: TensorId,
    trainable: bool,
}

/// Gradients produced by [`Tape::backward`], keyed by the identity of the
/// tensor each leaf was registered from. Non-trainable tensors never have an
/// entry.
#[derive(Debug, Default)]
pub struct GradientRecord<T> {
    grads: HashMap<TensorId, Tensor<T>>,
}

impl<T: Real> GradientRecord<T> {
    pub fn get(&self, tensor: &Tensor<T>) -> Option<&Tensor<T>> {
        self.grads.get(&tensor.id())
    }

    pub fn contains(&self, tensor: &Tensor<T>) -> bool {
        self.grads.contains_key(&tensor.id())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaves: HashMap<TensorId, NodeId>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaves: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, node: NodeId) -> &Tensor<T> {
        &self.nodes[node.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, leaf: Option<LeafInfo>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            leaf,
        });
        id
    }

    fn needs(&self, node: NodeId) -> bool {
        self.nodes[node.0].needs_grad
    }

    /// Registers a tensor as a graph input. Repeated registration of the same
    /// tensor returns the same node, so a parameter used twice accumulates one
    /// gradient. The trainable flag is snapshotted here.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> NodeId {
        if let Some(&node) = self.leaves.get(&tensor.id()) {
            return node;
        }
        let info = LeafInfo {
            source: tensor.id(),
            trainable: tensor.trainable(),
        };
        let node = self.push(tensor.clone(), Op::Leaf, info.trainable, Some(info));
        self.leaves.insert(tensor.id(), node);
        node
    }

    /// An anonymous constant; never differentiated.
    pub fn constant(&mut self, tensor: Tensor<T>) -> NodeId {
        self.push(tensor, Op::Constant, false, None)
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(Error::Dimension {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let data = matmul_raw(av.data(), bv.data(), m, k, n);
        let value = Tensor::matrix(m, n, data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul { a, b }, needs, None))
    }

    /// a · bᵀ; `b` is given row-major as [n × k].
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.cols() {
            return Err(Error::Dimension {
                op: "matmul_nt",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let data = matmul_nt_raw(av.data(), bv.data(), m, k, n);
        let value = Tensor::matrix(m, n, data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMulNt { a, b }, needs, None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Dimension {
                op: "add",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let data: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs, None))
    }

    pub fn mul_const(&mut self, a: NodeId, c: T) -> NodeId {
        let av = self.value(a);
        let data: Vec<T> = av.data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("shape preserved");
        let needs = self.needs(a);
        self.push(value, Op::MulConst { a, c }, needs, None)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total: T = self.value(a).data().iter().copied().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(total), Op::SumAll { a }, needs, None)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.cols() {
            return Err(Error::Dimension {
                op: "concat_rows",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let value = Tensor::matrix(av.rows() + bv.rows(), av.cols(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::ConcatRows { a, b }, needs, None))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let av = self.value(a);
        if av.shape().len() != 2 || start + width > av.cols() {
            return Err(Error::Dimension {
                op: "slice_cols",
                left: av.shape().to_vec(),
                right: vec![start, width],
            });
        }
        let (m, c) = (av.rows(), av.cols());
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            data.extend_from_slice(&av.data()[i * c + start..i * c + start + width]);
        }
        let value = Tensor::matrix(m, width, data)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::SliceCols { a, start, width }, needs, None))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let m = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.shape().len() != 2 || pv.rows() != m {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: pv.shape().to_vec(),
                });
            }
            total += pv.cols();
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::matrix(m, total, data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatCols { parts: parts.to_vec() }, needs, None))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "softmax_rows",
                left: av.shape().to_vec(),
                right: vec![],
            });
        }
        let (m, n) = (av.rows(), av.cols());
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = av.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            let mut exps = Vec::with_capacity(n);
            for &x in row {
                let e = (x - max).exp();
                denom += e;
                exps.push(e);
            }
            for e in exps {
                data.push(e / denom);
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::SoftmaxRows { a }, needs, None))
    }

    /// T5-style RMS normalization: each row divided by sqrt(mean of squares
    /// + 1e-6), scaled elementwise by `gain`.
    pub fn rmsnorm(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        let (xv, gv) = (self.value(x), self.value(gain));
        if xv.shape().len() != 2 || gv.shape() != [xv.cols()] {
            return Err(Error::Dimension {
                op: "rmsnorm",
                left: xv.shape().to_vec(),
                right: gv.shape().to_vec(),
            });
        }
        let (m, e) = (xv.rows(), xv.cols());
        let eps = T::cast(RMSNORM_EPS);
        let inv_e = T::one() / T::cast(e as f64);
        let mut data = Vec::with_capacity(m * e);
        for i in 0..m {
            let row = xv.row(i);
            let ms = row.iter().map(|&v| v * v).sum::<T>() * inv_e;
            let inv_r = (ms + eps).sqrt().recip();
            for (j, &v) in row.iter().enumerate() {
                data.push(v * inv_r * gv.data()[j]);
            }
        }
        let value = Tensor::matrix(m, e, data)?;
        let needs = self.needs(x) || self.needs(gain);
        Ok(self.push(value, Op::RmsNorm { x, gain }, needs, None))
    }

    /// Gated feed-forward: (gelu(x·W_gate) ⊙ (x·W_value)) · w_out, where
    /// W_gate and W_value are the left and right e×f halves of `w_in`.
    pub fn geglu(&mut self, x: NodeId, w_in: NodeId, w_out: NodeId) -> Result<NodeId> {
        let (xv, wi, wo) = (self.value(x), self.value(w_in), self.value(w_out));
        let bad = xv.shape().len() != 2
            || wi.shape().len() != 2
            || wo.shape().len() != 2
            || wi.rows() != xv.cols()
            || wi.cols() % 2 != 0
            || wo.rows() != wi.cols() / 2
            || wo.cols() != xv.cols();
        if bad {
            return Err(Error::Dimension {
                op: "geglu",
                left: xv.shape().to_vec(),
                right: wi.shape().to_vec(),
            });
        }
        let (m, e) = (xv.rows(), xv.cols());
        let f = wi.cols() / 2;
        let (gate_pre, value_pre) = geglu_projections(xv.data(), wi.data(), m, e, f);
        let mut hidden = Vec::with_capacity(m * f);
        for idx in 0..m * f {
            hidden.push(gelu(gate_pre[idx]) * value_pre[idx]);
        }
        let out = matmul_raw(&hidden, wo.data(), m, f, e);
        let value = Tensor::matrix(m, e, out)?;
        let needs = self.needs(x) || self.needs(w_in) || self.needs(w_out);
        Ok(self.push(value, Op::Geglu { x, w_in, w_out }, needs, None))
    }

    /// Embedding lookup: row i of the result is `table[ids[i]]`.
    pub fn embed(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "embed",
                left: tv.shape().to_vec(),
                right: vec![],
            });
        }
        let (v, e) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id as usize >= v {
                return Err(Error::Vocabulary(format!(
                    "token id {id} out of range for vocabulary of size {v}"
                )));
            }
            data.extend_from_slice(tv.row(id as usize));
        }
        let value = Tensor::matrix(ids.len(), e, data)?;
        let needs = self.needs(table);
        Ok(self.push(
            value,
            Op::Embed { table, ids: ids.to_vec() },
            needs,
            None,
        ))
    }

    /// Materializes one head's relative-position bias as a [rows × cols]
    /// matrix from a [num_buckets × heads] table. With `causal`, entries
    /// above the diagonal are pushed to -1e30 so softmax zeroes them.
    pub fn rel_bias(
        &mut self,
        table: NodeId,
        buckets: &[u32],
        rows: usize,
        cols: usize,
        head: usize,
        causal: bool,
    ) -> Result<NodeId> {
        let tv = self.value(table);
        if tv.shape().len() != 2 || head >= tv.cols() || buckets.len() != rows * cols {
            return Err(Error::Dimension {
                op: "rel_bias",
                left: tv.shape().to_vec(),
                right: vec![rows, cols, head],
            });
        }
        let mask = T::cast(MASK_NEG);
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let b = buckets[i * cols + j] as usize;
                let mut v = tv.get(b, head);
                if causal && j > i {
                    v = mask;
                }
                data.push(v);
            }
        }
        let value = Tensor::matrix(rows, cols, data)?;
        let needs = self.needs(table);
        Ok(self.push(
            value,
            Op::RelBias {
                table,
                buckets: buckets.to_vec(),
                rows,
                cols,
                head,
                causal,
            },
            needs,
            None,
        ))
    }

    /// Mean over positions of -log softmax(logits)[target]; a scalar node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.rows() != targets.len() || targets.is_empty() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let vocab = lv.cols();
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            if t as usize >= vocab {
                return Err(Error::Vocabulary(format!(
                    "target id {t} out of range for vocabulary of size {vocab}"
                )));
            }
            let row = lv.row(i);
            total += log_sum_exp(row) - row[t as usize];
        }
        let loss = total / T::cast(targets.len() as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            needs,
            None,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar node. Gradients are recorded only for
    /// leaves registered from trainable tensors; a detached constant yields an
    /// empty record.
    pub fn backward(&self, loss: NodeId) -> Result<GradientRecord<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                left: self.value(loss).shape().to_vec(),
                right: vec![1],
            });
        }
        let mut adjoints: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            adjoints[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(upstream) = adjoints[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream, &mut adjoints);
            if self.nodes[idx].leaf.is_some() {
                adjoints[idx] = Some(upstream);
            }
        }
        let mut record = GradientRecord::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            let Some(info) = node.leaf else { continue };
            if !info.trainable {
                continue;
            }
            if let Some(adj) = adjoints[idx].take() {
                let grad = Tensor::new(node.value.shape().to_vec(), adj).expect("adjoint shape");
                record.grads.insert(info.source, grad);
            }
        }
        Ok(record)
    }

    fn accumulate(&self, adjoints: &mut [Option<Vec<T>>], node: NodeId, contrib: &[T]) {
        if !self.needs(node) {
            return;
        }
        match &mut adjoints[node.0] {
            Some(adj) => {
                for (a, &c) in adj.iter_mut().zip(contrib) {
                    *a += c;
                }
            }
            slot => *slot = Some(contrib.to_vec()),
        }
    }

    fn propagate(&self, idx: usize, up: &[T], adjoints: &mut [Option<Vec<T>>]) {
        match &self.nodes[idx].op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.needs(*a) {
                    // dA = dC · Bᵀ
                    let da = matmul_nt_raw(up, bv.data(), m, n, k);
                    self.accumulate(adjoints, *a, &da);
                }
                if self.needs(*b) {
                    // dB = Aᵀ · dC
                    let db = matmul_tn_raw(av.data(), up, m, k, n);
                    self.accumulate(adjoints, *b, &db);
                }
            }
            Op::MatMulNt { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if self.needs(*a) {
                    // dA = dC · B
                    let da = matmul_raw(up, bv.data(), m, n, k);
                    self.accumulate(adjoints, *a, &da);
                }
                if self.needs(*b) {
                    // dB = dCᵀ · A
                    let db = matmul_tn_raw(up, av.data(), m, n, k);
                    self.accumulate(adjoints, *b, &db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(adjoints, *a, up);
                self.accumulate(adjoints, *b, up);
            }
            Op::MulConst { a, c } => {
                let da: Vec<T> = up.iter().map(|&u| u * *c).collect();
                self.accumulate(adjoints, *a, &da);
            }
            Op::SumAll { a } => {
                let da = vec![up[0]; self.value(*a).numel()];
                self.accumulate(adjoints, *a, &da);
            }
            Op::ConcatRows { a, b } => {
                let split = self.value(*a).numel();
                self.accumulate(adjoints, *a, &up[..split]);
                self.accumulate(adjoints, *b, &up[split..]);
            }
            Op::SliceCols { a, start, width } => {
                if self.needs(*a) {
                    let av = self.value(*a);
                    let (m, c) = (av.rows(), av.cols());
                    let mut da = vec![T::zero(); m * c];
                    for i in 0..m {
                        for j in 0..*width {
                            da[i * c + start + j] = up[i * width + j];
                        }
                    }
                    self.accumulate(adjoints, *a, &da);
                }
            }
            Op::ConcatCols { parts } => {
                let m = self.value(parts[0]).rows();
                let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dp.extend_from_slice(&up[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(adjoints, p, &dp);
                    }
                    offset += w;
                }
            }
            Op::SoftmaxRows { a } => {
                if self.needs(*a) {
                    let yv = &self.nodes[idx].value;
                    let (m, n) = (yv.rows(), yv.cols());
                    let mut da = Vec::with_capacity(m * n);
                    for i in 0..m {
                        let y = yv.row(i);
                        let u = &up[i * n..(i + 1) * n];
                        let dot: T = y.iter().zip(u).map(|(&yi, &ui)| yi * ui).sum();
                        for j in 0..n {
                            da.push(y[j] * (u[j] - dot));
                        }
                    }
                    self.accumulate(adjoints, *a, &da);
                }
            }
            Op::RmsNorm { x, gain } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let (m, e) = (xv.rows(), xv.cols());
                let eps = T::cast(RMSNORM_EPS);
                let inv_e = T::one() / T::cast(e as f64);
                let mut dx = if self.needs(*x) { vec![T::zero(); m * e] } else { vec![] };
                let mut dg = if self.needs(*gain) { vec![T::zero(); e] } else { vec![] };
                for i in 0..m {
                    let row = xv.row(i);
                    let u = &up[i * e..(i + 1) * e];
                    let ms = row.iter().map(|&v| v * v).sum::<T>() * inv_e;
                    let r = (ms + eps).sqrt();
                    let inv_r = r.recip();
                    if self.needs(*gain) {
                        for j in 0..e {
                            dg[j] += u[j] * row[j] * inv_r;
                        }
                    }
                    if self.needs(*x) {
                        let s: T = (0..e).map(|j| u[j] * gv.data()[j] * row[j]).sum();
                        let coef = s * inv_e * inv_r * inv_r * inv_r;
                        for j in 0..e {
                            dx[i * e + j] = u[j] * gv.data()[j] * inv_r - row[j] * coef;
                        }
                    }
                }
                if self.needs(*x) {
                    self.accumulate(adjoints, *x, &dx);
                }
                if self.needs(*gain) {
                    self.accumulate(adjoints, *gain, &dg);
                }
            }
            Op::Geglu { x, w_in, w_out } => {
                let xv = self.value(*x);
                let wi = self.value(*w_in);
                let wo = self.value(*w_out);
                let (m, e) = (xv.rows(), xv.cols());
                let f = wi.cols() / 2;
                let (gate_pre, value_pre) = geglu_projections(xv.data(), wi.data(), m, e, f);
                let mut hidden = Vec::with_capacity(m * f);
                for idx in 0..m * f {
                    hidden.push(gelu(gate_pre[idx]) * value_pre[idx]);
                }
                if self.needs(*w_out) {
                    // dWo = hiddenᵀ · dY
                    let dwo = matmul_tn_raw(&hidden, up, m, f, e);
                    self.accumulate(adjoints, *w_out, &dwo);
                }
                // dHidden = dY · Woᵀ
                let dh = matmul_nt_raw(up, wo.data(), m, e, f);
                let mut dgate = Vec::with_capacity(m * f);
                let mut dvalue = Vec::with_capacity(m * f);
                for idx in 0..m * f {
                    dgate.push(dh[idx] * value_pre[idx] * gelu_grad(gate_pre[idx]));
                    dvalue.push(dh[idx] * gelu(gate_pre[idx]));
                }
                if self.needs(*w_in) {
                    let dwg = matmul_tn_raw(xv.data(), &dgate, m, e, f);
                    let dwv = matmul_tn_raw(xv.data(), &dvalue, m, e, f);
                    let mut dwi = vec![T::zero(); e * 2 * f];
                    for r in 0..e {
                        dwi[r * 2 * f..r * 2 * f + f].copy_from_slice(&dwg[r * f..(r + 1) * f]);
                        dwi[r * 2 * f + f..(r + 1) * 2 * f].copy_from_slice(&dwv[r * f..(r + 1) * f]);
                    }
                    self.accumulate(adjoints, *w_in, &dwi);
                }
                if self.needs(*x) {
                    // dX = dGate · Wgᵀ + dValue · Wvᵀ, with Wg/Wv interleaved in w_in.
                    let mut dx = vec![T::zero(); m * e];
                    for i in 0..m {
                        for j in 0..f {
                            let dg = dgate[i * f + j];
                            let dv = dvalue[i * f + j];
                            for r in 0..e {
                                dx[i * e + r] +=
                                    dg * wi.data()[r * 2 * f + j] + dv * wi.data()[r * 2 * f + f + j];
                            }
                        }
                    }
                    self.accumulate(adjoints, *x, &dx);
                }
            }
            Op::Embed { table, ids } => {
                if self.needs(*table) {
                    let tv = self.value(*table);
                    let (v, e) = (tv.rows(), tv.cols());
                    let mut dt = vec![T::zero(); v * e];
                    for (i, &id) in ids.iter().enumerate() {
                        let base = id as usize * e;
                        for j in 0..e {
                            dt[base + j] += up[i * e + j];
                        }
                    }
                    self.accumulate(adjoints, *table, &dt);
                }
            }
            Op::RelBias { table, buckets, rows, cols, head, causal } => {
                if self.needs(*table) {
                    let tv = self.value(*table);
                    let (nb, h) = (tv.rows(), tv.cols());
                    let mut dt = vec![T::zero(); nb * h];
                    for i in 0..*rows {
                        for j in 0..*cols {
                            if *causal && j > i {
                                continue;
                            }
                            let b = buckets[i * cols + j] as usize;
                            dt[b * h + head] += up[i * cols + j];
                        }
                    }
                    self.accumulate(adjoints, *table, &dt);
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if self.needs(*logits) {
                    let lv = self.value(*logits);
                    let (t, v) = (lv.rows(), lv.cols());
                    let scale = up[0] / T::cast(t as f64);
                    let mut dl = Vec::with_capacity(t * v);
                    for (i, &target) in targets.iter().enumerate() {
                        let row = lv.row(i);
                        let lse = log_sum_exp(row);
                        for (j, &x) in row.iter().enumerate() {
                            let p = (x - lse).exp();
                            let indicator = if j == target as usize { T::one() } else { T::zero() };
                            dl.push((p - indicator) * scale);
                        }
                    }
                    self.accumulate(adjoints, *logits, &dl);
                }
            }
        }
    }
}

// ── raw kernels ──────────────────────────────────────────────────────

/// C[m×n] = A[m×k] · B[k×n], all row-major.
pub(crate) fn matmul_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

/// C[m×n] = A[m×k] · B[n×k]ᵀ.
pub(crate) fn matmul_nt_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// C[k×n] = A[m×k]ᵀ · B[m×n].
pub(crate) fn matmul_tn_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

fn geglu_projections<T: Real>(x: &[T], w_in: &[T], m: usize, e: usize, f: usize) -> (Vec<T>, Vec<T>) {
    // w_in is [e × 2f]: columns [0, f) are the gate half, [f, 2f) the value half.
    let mut gate = vec![T::zero(); m * f];
    let mut value = vec![T::zero(); m * f];
    for i in 0..m {
        for r in 0..e {
            let xir = x[i * e + r];
            if xir == T::zero() {
                continue;
            }
            let wrow = &w_in[r * 2 * f..(r + 1) * 2 * f];
            let grow = &mut gate[i * f..(i + 1) * f];
            for j in 0..f {
                grow[j] += xir * wrow[j];
            }
            let vrow = &mut value[i * f..(i + 1) * f];
            for j in 0..f {
                vrow[j] += xir * wrow[f + j];
            }
        }
    }
    (gate, value)
}

/// tanh-approximation GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::cast(0.5);
    let sqrt_2_over_pi = T::cast((2.0 / std::f64::consts::PI).sqrt());
    let c1 = T::cast(GELU_CUBIC);
    let u = sqrt_2_over_pi * (x + c1 * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::cast(0.5);
    let sqrt_2_over_pi = T::cast((2.0 / std::f64::consts::PI).sqrt());
    let c1 = T::cast(GELU_CUBIC);
    let three = T::cast(3.0);
    let u = sqrt_2_over_pi * (x + c1 * x * x * x);
    let t = u.tanh();
    let du = sqrt_2_over_pi * (T::one() + three * c1 * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Compares the tape gradient of `f` at `x` against central finite
/// differences, returning the maximum relative error
/// |analytic − numeric| / (|analytic| + |numeric| + 1e-12) over coordinates.
/// `f` must map its input node to a scalar node.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, step: T) -> Result<T>
where
    T: Real,
    F: Fn(&mut Tape<T>, NodeId) -> Result<NodeId>,
{
    let mut probe = x.clone();
    probe.set_trainable(true);
    let mut tape = Tape::new();
    let node = tape.leaf(&probe);
    let loss = f(&mut tape, node)?;
    let record = tape.backward(loss)?;
    let zero_grad = Tensor::zeros(probe.shape().to_vec());
    let analytic = record.get(&probe).unwrap_or(&zero_grad);

    let eval = |point: &Tensor<T>| -> Result<T> {
        let mut t = Tape::new();
        let n = t.leaf(point);
        let l = f(&mut t, n)?;
        Ok(t.value(l).item())
    };

    let denom_eps = T::cast(1e-12);
    let two = T::cast(2.0);
    let mut worst = T::zero();
    let mut point = probe.clone();
    for i in 0..point.numel() {
        let orig = point.data()[i];
        point.data_mut()[i] = orig + step;
        let plus = eval(&point)?;
        point.data_mut()[i] = orig - step;
        let minus = eval(&point)?;
        point.data_mut()[i] = orig;
        let numeric = (plus - minus) / (two * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs() + denom_eps);
        worst = worst.max(err);
    }
    Ok(worst)
}
