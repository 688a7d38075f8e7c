//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records one forward pass. Nodes are appended in evaluation
//! order, so insertion order is a valid topological order and
//! [`Graph::backward`] simply walks the tape in reverse. The graph is dropped
//! after the backward pass; parameters live in a [`ParamStore`] and receive
//! their gradients there.
//!
//! Most ops view a tensor as a matrix over its last dimension. Broadcasting is
//! explicit: [`Graph::add_row`] adds a `[c]` vector to every row of a
//! `[.., c]` tensor and nothing else broadcasts.

use std::collections::HashMap;

use super::kernels::{self, gelu, gelu_grad, sigmoid};
use super::params::{ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Probability clamp used inside the logarithms of the weighted BCE.
pub const PROB_CLAMP: Scalar = 1e-7;

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, Scalar),
    Transpose(NodeId),
    Reshape(NodeId),
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize },
    ConcatRows(Vec<NodeId>),
    GatherRows { table: NodeId, index: Vec<usize> },
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<Scalar>,
        inv_std: Vec<Scalar>,
    },
    Gelu(NodeId),
    Sigmoid(NodeId),
    RowDot(NodeId, NodeId),
    BatchNormTrain {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<Scalar>,
        inv_std: Vec<Scalar>,
    },
    BatchNormEval {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        mean: Vec<Scalar>,
        inv_std: Vec<Scalar>,
    },
    WeightedBce {
        probs: NodeId,
        labels: Vec<Scalar>,
        mask: Vec<Scalar>,
        weights: Vec<Scalar>,
        batch: usize,
    },
    Sum(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<Scalar>,
    /// Biased (1/B) variance used for normalization.
    pub var: Vec<Scalar>,
    pub batch: usize,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

/// Gradients for every node of a graph after a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<Scalar>>>,
}

impl Gradients {
    pub fn get(&self, node: NodeId) -> Option<&[Scalar]> {
        self.grads.get(node.0).and_then(|g| g.as_deref())
    }
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

    /// Parameters referenced by this graph, sorted.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.param_nodes.keys().copied().collect();
        ids.sort();
        ids
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        id
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    fn mat(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.as_matrix()
    }

    fn data(&self, id: NodeId) -> &[Scalar] {
        self.nodes[id.0].value.data()
    }

    /// Leaf holding a copy of `tensor`; differentiable when `requires_grad` is set.
    pub fn input(&mut self, tensor: Tensor) -> NodeId {
        let needs = tensor.requires_grad;
        let mut t = tensor;
        t.grad = None;
        self.push(t, Op::Input, needs)
    }

    pub fn constant(&mut self, tensor: Tensor) -> NodeId {
        let mut t = tensor;
        t.requires_grad = false;
        self.input(t)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let src = store.get(id);
        let needs = src.requires_grad;
        let mut t = src.clone();
        t.grad = None;
        let n = self.push(t, Op::Param(id), needs);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul: cannot multiply {:?} by {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "add: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        let out: Vec<Scalar> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add(a, b), needs))
    }

    /// Adds a `[c]` vector to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (_, c) = self.mat(x);
        if self.shape(row) != [c] {
            return Err(shape_err!(
                "add_row: row {:?} does not match last dim of {:?}",
                self.shape(row),
                self.shape(x)
            ));
        }
        let r = self.data(row);
        let out: Vec<Scalar> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + r[i % c])
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.any_grad(&[x, row]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::AddRow(x, row), needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "mul: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        let out: Vec<Scalar> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: NodeId, s: Scalar) -> NodeId {
        let out: Vec<Scalar> = self.data(x).iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.any_grad(&[x]);
        self.push(Tensor::new(&shape, out).unwrap(), Op::Scale(x, s), needs)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err!("transpose expects rank 2, got {:?}", s));
        }
        let out = kernels::transpose(self.data(x), s[0], s[1]);
        let needs = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&[s[1], s[0]], out)?, Op::Transpose(x), needs))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).clone().reshape(shape)?;
        let needs = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// Columns `start..start+len` of the matrix view, as `[rows, len]`.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.mat(x);
        if len == 0 || start + len > c {
            return Err(shape_err!(
                "slice_cols {}..{} out of range for {:?}",
                start,
                start + len,
                self.shape(x)
            ));
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + start + len]);
        }
        let needs = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&[r, len], out)?, Op::SliceCols { x, start }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts
            .first()
            .map(|&p| self.mat(p).0)
            .ok_or_else(|| shape_err!("concat_cols of nothing"))?;
        if parts.iter().any(|&p| self.mat(p).0 != rows) {
            return Err(shape_err!("concat_cols: row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.mat(p).1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                let (_, c) = self.mat(p);
                out.extend_from_slice(&self.data(p)[i * c..(i + 1) * c]);
            }
        }
        let needs = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(&[rows, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            needs,
        ))
    }

    /// Rows `start..start+len` of the matrix view, as `[len, cols]`.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.mat(x);
        if len == 0 || start + len > r {
            return Err(shape_err!(
                "slice_rows {}..{} out of range for {:?}",
                start,
                start + len,
                self.shape(x)
            ));
        }
        let out = self.data(x)[start * c..(start + len) * c].to_vec();
        let needs = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&[len, c], out)?, Op::SliceRows { x, start }, needs))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = parts
            .first()
            .map(|&p| self.mat(p).1)
            .ok_or_else(|| shape_err!("concat_rows of nothing"))?;
        if parts.iter().any(|&p| self.mat(p).1 != cols) {
            return Err(shape_err!(
                "concat_rows: column counts differ ({:?})",
                parts.iter().map(|&p| self.shape(p).to_vec()).collect::<Vec<_>>()
            ));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let rows = out.len() / cols;
        let needs = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(&[rows, cols], out)?,
            Op::ConcatRows(parts.to_vec()),
            needs,
        ))
    }

    /// `out[i] = table[index[i]]` over rows of the matrix view.
    pub fn gather_rows(&mut self, table: NodeId, index: &[usize]) -> Result<NodeId> {
        let (r, c) = self.mat(table);
        if index.is_empty() || index.iter().any(|&i| i >= r) {
            return Err(shape_err!(
                "gather_rows: index out of range for {:?}",
                self.shape(table)
            ));
        }
        let d = self.data(table);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        let needs = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::new(&[index.len(), c], out)?,
            Op::GatherRows {
                table,
                index: index.to_vec(),
            },
            needs,
        ))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.mat(x);
        let d = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max);
            let o = &mut out[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for (oj, &v) in o.iter_mut().zip(row) {
                *oj = (v - max).exp();
                sum += *oj;
            }
            for oj in o.iter_mut() {
                *oj /= sum;
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.any_grad(&[x]);
        self.push(Tensor::new(&shape, out).unwrap(), Op::Softmax(x), needs)
    }

    /// Normalizes each row of the matrix view, then applies `gain`/`bias`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: Scalar,
    ) -> Result<NodeId> {
        let (r, c) = self.mat(x);
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(shape_err!(
                "layer_norm: gain {:?}/bias {:?} do not match last dim of {:?}",
                self.shape(gain),
                self.shape(bias),
                self.shape(x)
            ));
        }
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be > 0".into()));
        }
        let d = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let mean = row.iter().sum::<Scalar>() / c as Scalar;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Scalar>() / c as Scalar;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat[i * c + j] = xh;
                out[i * c + j] = xh * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<Scalar> = self.data(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.any_grad(&[x]);
        self.push(Tensor::new(&shape, out).unwrap(), Op::Gelu(x), needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out: Vec<Scalar> = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.any_grad(&[x]);
        self.push(Tensor::new(&shape, out).unwrap(), Op::Sigmoid(x), needs)
    }

    /// Per-row dot product of two equal-shape matrices, giving `[rows]`.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "row_dot: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        let (r, c) = self.mat(a);
        let (da, db) = (self.data(a), self.data(b));
        let out: Vec<Scalar> = (0..r)
            .map(|i| {
                da[i * c..(i + 1) * c]
                    .iter()
                    .zip(&db[i * c..(i + 1) * c])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[r], out)?, Op::RowDot(a, b), needs))
    }

    /// Column-wise normalization over the batch rows of `x[B×C]` using batch
    /// statistics. Requires `B >= 2`.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: Scalar,
    ) -> Result<(NodeId, BatchStats)> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err!("batch_norm expects [B, C], got {:?}", s));
        }
        let (bsz, c) = (s[0], s[1]);
        if bsz < 2 {
            return Err(Error::Contract(
                "training-mode batch normalization needs a batch of at least 2".into(),
            ));
        }
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(shape_err!("batch_norm: gain/bias must be [{c}]"));
        }
        let d = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for j in 0..c {
            let m = (0..bsz).map(|i| d[i * c + j]).sum::<Scalar>() / bsz as Scalar;
            mean[j] = m;
            var[j] = (0..bsz).map(|i| (d[i * c + j] - m).powi(2)).sum::<Scalar>() / bsz as Scalar;
        }
        let inv_std: Vec<Scalar> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; bsz * c];
        let mut out = vec![0.0; bsz * c];
        for i in 0..bsz {
            for j in 0..c {
                let xh = (d[i * c + j] - mean[j]) * inv_std[j];
                xhat[i * c + j] = xh;
                out[i * c + j] = xh * g[j] + b[j];
            }
        }
        let needs = self.any_grad(&[x, gain, bias]);
        let node = self.push(
            Tensor::new(&[bsz, c], out)?,
            Op::BatchNormTrain {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            needs,
        );
        Ok((
            node,
            BatchStats {
                mean,
                var,
                batch: bsz,
            },
        ))
    }

    /// Column-wise affine normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        mean: &[Scalar],
        var: &[Scalar],
        eps: Scalar,
    ) -> Result<NodeId> {
        let (r, c) = self.mat(x);
        if mean.len() != c || var.len() != c || self.shape(gain) != [c] || self.shape(bias) != [c]
        {
            return Err(shape_err!("batch_norm_eval: statistics must have {c} entries"));
        }
        let inv_std: Vec<Scalar> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let d = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = (d[i * c + j] - mean[j]) * inv_std[j] * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNormEval {
                x,
                gain,
                bias,
                mean: mean.to_vec(),
                inv_std,
            },
            needs,
        ))
    }

    /// `(1/B) Σ_i Σ_j mask_ij · w_j · BCE(p_ij, y_ij)` with probabilities
    /// clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the logarithms.
    pub fn weighted_bce(
        &mut self,
        probs: NodeId,
        labels: &[Scalar],
        mask: &[Scalar],
        weights: &[Scalar],
    ) -> Result<NodeId> {
        let s = self.shape(probs).to_vec();
        if s.len() != 2 {
            return Err(shape_err!("weighted_bce expects [B, C] probabilities, got {:?}", s));
        }
        let (bsz, c) = (s[0], s[1]);
        if labels.len() != bsz * c || mask.len() != bsz * c || weights.len() != c {
            return Err(shape_err!(
                "weighted_bce: probs {:?}, labels {}, mask {}, weights {}",
                s,
                labels.len(),
                mask.len(),
                weights.len()
            ));
        }
        let p = self.data(probs);
        let mut total = 0.0;
        for i in 0..bsz {
            for j in 0..c {
                let k = i * c + j;
                if mask[k] == 0.0 {
                    continue;
                }
                total += mask[k] * weights[j] * bce_term(p[k], labels[k]);
            }
        }
        total /= bsz as Scalar;
        let needs = self.any_grad(&[probs]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedBce {
                probs,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
                weights: weights.to_vec(),
                batch: bsz,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: Scalar = self.data(x).iter().sum();
        let needs = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), needs)
    }

    /// Reverse pass from a scalar node. Parameter gradients are added into
    /// `store`; they accumulate across calls until zeroed.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward_grads(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(pid), Some(g)) = (&node.op, &grads.grads[i]) {
                store.accumulate_grad(*pid, g);
            }
        }
        Ok(grads)
    }

    /// Reverse pass without touching any parameter store.
    pub fn backward_grads(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node has shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<Scalar>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[Scalar], grads: &mut [Option<Vec<Scalar>>]) {
        let mut acc = |id: NodeId, delta: Vec<Scalar>| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => {
                    for (a, b) in existing.iter_mut().zip(&delta) {
                        *a += *b;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].needs_grad {
                    let bt = kernels::transpose(self.data(*b), k, n);
                    acc(*a, kernels::matmul(g, &bt, m, n, k));
                }
                if self.nodes[b.0].needs_grad {
                    let at = kernels::transpose(self.data(*a), m, k);
                    acc(*b, kernels::matmul(&at, g, k, m, n));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::AddRow(x, row) => {
                acc(*x, g.to_vec());
                let c = self.value(*row).len();
                let mut gr = vec![0.0; c];
                for (i, v) in g.iter().enumerate() {
                    gr[i % c] += v;
                }
                acc(*row, gr);
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, g.iter().zip(db).map(|(x, y)| x * y).collect());
                acc(*b, g.iter().zip(da).map(|(x, y)| x * y).collect());
            }
            Op::Scale(x, s) => acc(*x, g.iter().map(|v| v * s).collect()),
            Op::Transpose(x) => {
                let s = self.shape(*x);
                acc(*x, kernels::transpose(g, s[1], s[0]));
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::SliceCols { x, start } => {
                let (r, c) = self.mat(*x);
                let len = g.len() / r;
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                acc(*x, gx);
            }
            Op::ConcatCols(parts) => {
                let total: usize = parts.iter().map(|&p| self.mat(p).1).sum();
                let rows = g.len() / total;
                let mut off = 0;
                for &p in parts {
                    let (_, c) = self.mat(p);
                    let mut gp = Vec::with_capacity(rows * c);
                    for i in 0..rows {
                        gp.extend_from_slice(&g[i * total + off..i * total + off + c]);
                    }
                    acc(p, gp);
                    off += c;
                }
            }
            Op::SliceRows { x, start } => {
                let (r, c) = self.mat(*x);
                let mut gx = vec![0.0; r * c];
                gx[start * c..start * c + g.len()].copy_from_slice(g);
                acc(*x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::GatherRows { table, index } => {
                let (r, c) = self.mat(*table);
                let mut gt = vec![0.0; r * c];
                for (k, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        gt[i * c + j] += g[k * c + j];
                    }
                }
                acc(*table, gt);
            }
            Op::Softmax(x) => {
                let (r, c) = self.mat(*x);
                let y = node.value.data();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: Scalar = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, c) = self.mat(*x);
                let gn = self.data(*gain);
                let mut ggain = vec![0.0; c];
                let mut gbias = vec![0.0; c];
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let mut mean_gh = 0.0;
                    let mut mean_ghx = 0.0;
                    for j in 0..c {
                        let k = i * c + j;
                        ggain[j] += g[k] * xhat[k];
                        gbias[j] += g[k];
                        let gh = g[k] * gn[j];
                        mean_gh += gh;
                        mean_ghx += gh * xhat[k];
                    }
                    mean_gh /= c as Scalar;
                    mean_ghx /= c as Scalar;
                    for j in 0..c {
                        let k = i * c + j;
                        gx[k] = inv_std[i] * (g[k] * gn[j] - mean_gh - xhat[k] * mean_ghx);
                    }
                }
                acc(*x, gx);
                acc(*gain, ggain);
                acc(*bias, gbias);
            }
            Op::Gelu(x) => acc(
                *x,
                g.iter()
                    .zip(self.data(*x))
                    .map(|(gv, &xv)| gv * gelu_grad(xv))
                    .collect(),
            ),
            Op::Sigmoid(x) => acc(
                *x,
                g.iter()
                    .zip(node.value.data())
                    .map(|(gv, &y)| gv * y * (1.0 - y))
                    .collect(),
            ),
            Op::RowDot(a, b) => {
                let (r, c) = self.mat(*a);
                let (da, db) = (self.data(*a), self.data(*b));
                let mut ga = vec![0.0; r * c];
                let mut gb = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[i] * db[i * c + j];
                        gb[i * c + j] = g[i] * da[i * c + j];
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::BatchNormTrain {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let s = self.shape(*x);
                let (bsz, c) = (s[0], s[1]);
                let gn = self.data(*gain);
                let mut ggain = vec![0.0; c];
                let mut gbias = vec![0.0; c];
                let mut gx = vec![0.0; bsz * c];
                for j in 0..c {
                    let mut mean_gh = 0.0;
                    let mut mean_ghx = 0.0;
                    for i in 0..bsz {
                        let k = i * c + j;
                        ggain[j] += g[k] * xhat[k];
                        gbias[j] += g[k];
                        let gh = g[k] * gn[j];
                        mean_gh += gh;
                        mean_ghx += gh * xhat[k];
                    }
                    mean_gh /= bsz as Scalar;
                    mean_ghx /= bsz as Scalar;
                    for i in 0..bsz {
                        let k = i * c + j;
                        gx[k] = inv_std[j] * (g[k] * gn[j] - mean_gh - xhat[k] * mean_ghx);
                    }
                }
                acc(*x, gx);
                acc(*gain, ggain);
                acc(*bias, gbias);
            }
            Op::BatchNormEval {
                x,
                gain,
                bias,
                mean,
                inv_std,
            } => {
                let (r, c) = self.mat(*x);
                let dx = self.data(*x);
                let gn = self.data(*gain);
                let mut ggain = vec![0.0; c];
                let mut gbias = vec![0.0; c];
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        let k = i * c + j;
                        let xh = (dx[k] - mean[j]) * inv_std[j];
                        ggain[j] += g[k] * xh;
                        gbias[j] += g[k];
                        gx[k] = g[k] * gn[j] * inv_std[j];
                    }
                }
                acc(*x, gx);
                acc(*gain, ggain);
                acc(*bias, gbias);
            }
            Op::WeightedBce {
                probs,
                labels,
                mask,
                weights,
                batch,
            } => {
                let c = weights.len();
                let p = self.data(*probs);
                let scale = g[0] / *batch as Scalar;
                let gp = p
                    .iter()
                    .enumerate()
                    .map(|(k, &pk)| {
                        if mask[k] == 0.0 {
                            return 0.0;
                        }
                        scale * mask[k] * weights[k % c] * bce_grad(pk, labels[k])
                    })
                    .collect();
                acc(*probs, gp);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                acc(*x, vec![g[0]; n]);
            }
        }
    }
}

#[inline]
fn clamp_prob(p: Scalar) -> Scalar {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

#[inline]
pub(crate) fn bce_term(p: Scalar, y: Scalar) -> Scalar {
    let pc = clamp_prob(p);
    -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
}

/// Derivative of [`bce_term`] in `p`; zero where the clamp is active.
#[inline]
fn bce_grad(p: Scalar, y: Scalar) -> Scalar {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        return 0.0;
    }
    -y / p + (1.0 - y) / (1.0 - p)
}
