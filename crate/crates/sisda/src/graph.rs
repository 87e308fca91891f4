//! Reverse-mode automatic differentiation on a define-by-run tape.
//!
//! A [`Graph`] is an arena of nodes. Every op builder evaluates eagerly,
//! validates shapes, rejects non-finite results, and records the inputs it
//! needs to replay the chain rule in reverse. Graphs are cheap and rebuilt
//! per forward pass; nothing is compiled or cached across passes. All
//! arithmetic is `f64`.
//!
//! Gradients for every node survive [`Graph::backward`], so interior
//! quantities (attention probabilities, pre-softmax scores) can be inspected
//! after the sweep without any retain flags.

use std::collections::HashMap;

use thiserror::Error;

/// Values below this are clamped before taking a logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("tensor shape {shape:?} holds {expected} values, got {got}")]
    ShapeLenMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: shape mismatch on node(s) {nodes:?}: {detail}")]
    ShapeMismatch {
        op: &'static str,
        nodes: Vec<NodeId>,
        detail: String,
    },
    #[error("{op} produced a non-finite value at node {node}")]
    NonFinite { op: &'static str, node: NodeId },
    #[error("{op}: index {index} out of bounds for {bound} rows (node {node})")]
    IndexOutOfBounds {
        op: &'static str,
        node: NodeId,
        index: usize,
        bound: usize,
    },
    #[error("backward root (node {node}) must be scalar, found shape {shape:?}")]
    RootNotScalar { node: NodeId, shape: Vec<usize> },
    #[error("no gradient on node {0}; run backward first")]
    MissingGradient(NodeId),
    #[error("unknown leaf `{0}`")]
    UnknownLeaf(String),
    #[error("leaf `{0}` bound twice")]
    DuplicateLeaf(String),
}

/// Index of a node within its [`Graph`].
pub type NodeId = usize;

/// Dense row-major tensor. Rank 0 (scalar), 1 (vector) and 2 (matrix) are
/// the only ranks the op set produces.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, GraphError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(GraphError::ShapeLenMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, GraphError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Sole entry of a scalar (or single-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Row count for rank-2 tensors.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count for rank-2 tensors.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// Broadcast a vector across every row of a matrix.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Mul(NodeId, NodeId),
    SoftmaxRows(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Softplus(NodeId),
    Gelu(NodeId),
    LayerNormRows {
        input: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    GatherRows(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    SumAll(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Mul(..) => "mul",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Softplus(..) => "softplus",
            Op::Gelu(..) => "gelu",
            Op::LayerNormRows { .. } => "layer_norm_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::SumAll(..) => "sum_all",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
}

/// Define-by-run computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: HashMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Registers a named differentiable input.
    pub fn leaf(&mut self, name: &str, value: Tensor) -> Result<NodeId, GraphError> {
        if self.leaves.contains_key(name) {
            return Err(GraphError::DuplicateLeaf(name.to_string()));
        }
        let id = self.push(Op::Leaf, value)?;
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    /// Registers a non-trainable input. Gradients still flow through it but
    /// are usually ignored by callers.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId, GraphError> {
        self.push(Op::Constant, value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id].grad.as_ref()
    }

    pub fn leaf_id(&self, name: &str) -> Result<NodeId, GraphError> {
        self.leaves
            .get(name)
            .copied()
            .ok_or_else(|| GraphError::UnknownLeaf(name.to_string()))
    }

    pub fn leaf_grad(&self, name: &str) -> Result<&Tensor, GraphError> {
        let id = self.leaf_id(name)?;
        self.nodes[id]
            .grad
            .as_ref()
            .ok_or(GraphError::MissingGradient(id))
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId, GraphError> {
        let id = self.nodes.len();
        if !value.all_finite() {
            return Err(GraphError::NonFinite {
                op: op.name(),
                node: id,
            });
        }
        self.nodes.push(Node {
            op,
            value,
            grad: None,
        });
        Ok(id)
    }

    fn require_matrix(
        &self,
        op: &'static str,
        id: NodeId,
    ) -> Result<(usize, usize), GraphError> {
        let shape = self.nodes[id].value.shape();
        if shape.len() != 2 {
            return Err(GraphError::ShapeMismatch {
                op,
                nodes: vec![id],
                detail: format!("expected matrix, found shape {shape:?}"),
            });
        }
        Ok((shape[0], shape[1]))
    }

    // ---- op builders ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (m, k) = self.require_matrix("matmul", a)?;
        let (k2, n) = self.require_matrix("matmul", b)?;
        if k != k2 {
            return Err(GraphError::ShapeMismatch {
                op: "matmul",
                nodes: vec![a, b],
                detail: format!("inner dims {k} vs {k2}"),
            });
        }
        let av = self.nodes[a].value.data();
        let bv = self.nodes[b].value.data();
        let mut out = vec![0.0; m * n];
        matmul_into(av, bv, &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMul(a, b), t)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let (m, n) = self.require_matrix("transpose", a)?;
        let av = self.nodes[a].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        self.push(Op::Transpose(a), t)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(GraphError::ShapeMismatch {
                op: "add",
                nodes: vec![a, b],
                detail: format!(
                    "{:?} vs {:?}",
                    self.nodes[a].value.shape(),
                    self.nodes[b].value.shape()
                ),
            });
        }
        let data = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.nodes[a].value.shape().to_vec(), data)?;
        self.push(Op::Add(a, b), t)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, GraphError> {
        let (m, n) = self.require_matrix("add_row", a)?;
        let rshape = self.nodes[row].value.shape();
        if rshape != [n] {
            return Err(GraphError::ShapeMismatch {
                op: "add_row",
                nodes: vec![a, row],
                detail: format!("row shape {rshape:?} vs {n} columns"),
            });
        }
        let av = self.nodes[a].value.data();
        let rv = self.nodes[row].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = av[i * n + j] + rv[j];
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        self.push(Op::AddRow(a, row), t)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, GraphError> {
        let data = self.nodes[a].value.data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(self.nodes[a].value.shape().to_vec(), data)?;
        self.push(Op::Scale(a, factor), t)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(GraphError::ShapeMismatch {
                op: "mul",
                nodes: vec![a, b],
                detail: format!(
                    "{:?} vs {:?}",
                    self.nodes[a].value.shape(),
                    self.nodes[b].value.shape()
                ),
            });
        }
        let data = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.nodes[a].value.shape().to_vec(), data)?;
        self.push(Op::Mul(a, b), t)
    }

    /// Row-wise softmax with max subtraction. Rows sum to 1; entries pushed
    /// below `exp` underflow (e.g. an additive `-1e30` mask) come out as
    /// exact zeros.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let (m, n) = self.require_matrix("softmax_rows", a)?;
        let av = self.nodes[a].value.data();
        let mut out = av.to_vec();
        for i in 0..m {
            softmax_row(&mut out[i * n..(i + 1) * n]);
        }
        let t = Tensor::new(vec![m, n], out)?;
        self.push(Op::SoftmaxRows(a), t)
    }

    /// Natural log of `max(x, 1e-12)`.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let data = self.nodes[a]
            .value
            .data()
            .iter()
            .map(|x| x.max(LOG_FLOOR).ln())
            .collect();
        let t = Tensor::new(self.nodes[a].value.shape().to_vec(), data)?;
        self.push(Op::Log(a), t)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let data = self.nodes[a].value.data().iter().map(|x| x.exp()).collect();
        let t = Tensor::new(self.nodes[a].value.shape().to_vec(), data)?;
        self.push(Op::Exp(a), t)
    }

    /// `ln(1 + e^x)`, computed stably for large |x|.
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let data = self.nodes[a].value.data().iter().map(|x| softplus(*x)).collect();
        let t = Tensor::new(self.nodes[a].value.shape().to_vec(), data)?;
        self.push(Op::Softplus(a), t)
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let data = self.nodes[a].value.data().iter().map(|x| gelu(*x)).collect();
        let t = Tensor::new(self.nodes[a].value.shape().to_vec(), data)?;
        self.push(Op::Gelu(a), t)
    }

    /// Per-row layer normalization with learnable gain and bias vectors.
    pub fn layer_norm_rows(
        &mut self,
        input: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId, GraphError> {
        let (m, n) = self.require_matrix("layer_norm_rows", input)?;
        if self.nodes[gain].value.shape() != [n] || self.nodes[bias].value.shape() != [n] {
            return Err(GraphError::ShapeMismatch {
                op: "layer_norm_rows",
                nodes: vec![input, gain, bias],
                detail: format!(
                    "gain {:?} / bias {:?} vs {n} columns",
                    self.nodes[gain].value.shape(),
                    self.nodes[bias].value.shape()
                ),
            });
        }
        let x = self.nodes[input].value.data();
        let g = self.nodes[gain].value.data();
        let b = self.nodes[bias].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let (mean, inv_std) = row_moments(row, eps);
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        self.push(
            Op::LayerNormRows {
                input,
                gain,
                bias,
                eps,
            },
            t,
        )
    }

    /// Selects rows of a matrix by index (repeats allowed). Also serves as
    /// the embedding lookup.
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId, GraphError> {
        let (m, n) = self.require_matrix("gather_rows", a)?;
        let id = self.nodes.len();
        for &ix in indices {
            if ix >= m {
                return Err(GraphError::IndexOutOfBounds {
                    op: "gather_rows",
                    node: id,
                    index: ix,
                    bound: m,
                });
            }
        }
        let av = self.nodes[a].value.data();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &ix in indices {
            out.extend_from_slice(&av[ix * n..(ix + 1) * n]);
        }
        let t = Tensor::new(vec![indices.len(), n], out)?;
        self.push(Op::GatherRows(a, indices.to_vec()), t)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        if parts.is_empty() {
            return Err(GraphError::ShapeMismatch {
                op: "concat_rows",
                nodes: vec![],
                detail: "empty part list".to_string(),
            });
        }
        let (_, n) = self.require_matrix("concat_rows", parts[0])?;
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.require_matrix("concat_rows", p)?;
            if pn != n {
                return Err(GraphError::ShapeMismatch {
                    op: "concat_rows",
                    nodes: parts.to_vec(),
                    detail: format!("column counts differ: {pn} vs {n}"),
                });
            }
            rows += pm;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(self.nodes[p].value.data());
        }
        let t = Tensor::new(vec![rows, n], out)?;
        self.push(Op::ConcatRows(parts.to_vec()), t)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        if parts.is_empty() {
            return Err(GraphError::ShapeMismatch {
                op: "concat_cols",
                nodes: vec![],
                detail: "empty part list".to_string(),
            });
        }
        let (m, _) = self.require_matrix("concat_cols", parts[0])?;
        let mut cols = 0;
        for &p in parts {
            let (pm, pn) = self.require_matrix("concat_cols", p)?;
            if pm != m {
                return Err(GraphError::ShapeMismatch {
                    op: "concat_cols",
                    nodes: parts.to_vec(),
                    detail: format!("row counts differ: {pm} vs {m}"),
                });
            }
            cols += pn;
        }
        let mut out = vec![0.0; m * cols];
        let mut offset = 0;
        for &p in parts {
            let pn = self.nodes[p].value.cols();
            let pv = self.nodes[p].value.data();
            for i in 0..m {
                out[i * cols + offset..i * cols + offset + pn]
                    .copy_from_slice(&pv[i * pn..(i + 1) * pn]);
            }
            offset += pn;
        }
        let t = Tensor::new(vec![m, cols], out)?;
        self.push(Op::ConcatCols(parts.to_vec()), t)
    }

    pub fn slice_cols(
        &mut self,
        a: NodeId,
        start: usize,
        end: usize,
    ) -> Result<NodeId, GraphError> {
        let (m, n) = self.require_matrix("slice_cols", a)?;
        if start >= end || end > n {
            return Err(GraphError::ShapeMismatch {
                op: "slice_cols",
                nodes: vec![a],
                detail: format!("column range {start}..{end} of {n}"),
            });
        }
        let w = end - start;
        let av = self.nodes[a].value.data();
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&av[i * n + start..i * n + end]);
        }
        let t = Tensor::new(vec![m, w], out)?;
        self.push(Op::SliceCols(a, start, end), t)
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let total: f64 = self.nodes[a].value.data().iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(total))
    }

    // ---- backward ----

    /// Seeds `root` with gradient 1 and propagates along the tape in reverse
    /// creation order. Gradients from earlier sweeps are cleared.
    pub fn backward(&mut self, root: NodeId) -> Result<(), GraphError> {
        if !self.nodes[root].value.is_scalar() {
            return Err(GraphError::RootNotScalar {
                node: root,
                shape: self.nodes[root].value.shape().to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            let Some(out_grad) = grads[id].take() else {
                continue;
            };
            self.apply_vjp(id, &out_grad, &mut grads);
            let shape = self.nodes[id].value.shape().to_vec();
            // Tensor::new cannot fail here: out_grad matches the node's value.
            let g = Tensor::new(shape, out_grad)?;
            match &mut self.nodes[id].grad {
                Some(existing) => {
                    for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e = *v;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        // Nodes the sweep never reached get explicit zero gradients so
        // callers can read a gradient for every node unconditionally.
        for node in self.nodes.iter_mut().take(root + 1) {
            if node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(())
    }

    fn apply_vjp(&self, id: NodeId, out_grad: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let accum = |grads: &mut [Option<Vec<f64>>], target: NodeId, contrib: &[f64]| {
            let slot = grads[target]
                .get_or_insert_with(|| vec![0.0; self.nodes[target].value.len()]);
            for (s, c) in slot.iter_mut().zip(contrib) {
                *s += c;
            }
        };

        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                let n = self.nodes[*b].value.cols();
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                // dA = dOut * B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..k {
                        let mut acc = 0.0;
                        for c in 0..n {
                            acc += out_grad[i * n + c] * bv[j * n + c];
                        }
                        da[i * k + j] = acc;
                    }
                }
                accum(grads, *a, &da);
                // dB = A^T * dOut
                let mut db = vec![0.0; k * n];
                for i in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for r in 0..m {
                            acc += av[r * k + i] * out_grad[r * n + j];
                        }
                        db[i * n + j] = acc;
                    }
                }
                accum(grads, *b, &db);
            }
            Op::Transpose(a) => {
                let (m, n) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = out_grad[j * m + i];
                    }
                }
                accum(grads, *a, &da);
            }
            Op::Add(a, b) => {
                accum(grads, *a, out_grad);
                accum(grads, *b, out_grad);
            }
            Op::AddRow(a, row) => {
                accum(grads, *a, out_grad);
                let n = self.nodes[*row].value.len();
                let m = self.nodes[*a].value.rows();
                let mut dr = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dr[j] += out_grad[i * n + j];
                    }
                }
                accum(grads, *row, &dr);
            }
            Op::Scale(a, factor) => {
                let da: Vec<f64> = out_grad.iter().map(|g| g * factor).collect();
                accum(grads, *a, &da);
            }
            Op::Mul(a, b) => {
                let bv = self.nodes[*b].value.data();
                let av = self.nodes[*a].value.data();
                let da: Vec<f64> = out_grad.iter().zip(bv).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = out_grad.iter().zip(av).map(|(g, x)| g * x).collect();
                accum(grads, *a, &da);
                accum(grads, *b, &db);
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = (node.value.rows(), node.value.cols());
                let s = node.value.data();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let row = &s[i * n..(i + 1) * n];
                    let grow = &out_grad[i * n..(i + 1) * n];
                    let dot: f64 = row.iter().zip(grow).map(|(p, g)| p * g).sum();
                    for j in 0..n {
                        da[i * n + j] = row[j] * (grow[j] - dot);
                    }
                }
                accum(grads, *a, &da);
            }
            Op::Log(a) => {
                let xv = self.nodes[*a].value.data();
                let da: Vec<f64> = out_grad
                    .iter()
                    .zip(xv)
                    .map(|(g, x)| if *x > LOG_FLOOR { g / x } else { 0.0 })
                    .collect();
                accum(grads, *a, &da);
            }
            Op::Exp(a) => {
                let yv = node.value.data();
                let da: Vec<f64> = out_grad.iter().zip(yv).map(|(g, y)| g * y).collect();
                accum(grads, *a, &da);
            }
            Op::Softplus(a) => {
                let xv = self.nodes[*a].value.data();
                let da: Vec<f64> = out_grad
                    .iter()
                    .zip(xv)
                    .map(|(g, x)| g * sigmoid(*x))
                    .collect();
                accum(grads, *a, &da);
            }
            Op::Gelu(a) => {
                let xv = self.nodes[*a].value.data();
                let da: Vec<f64> = out_grad
                    .iter()
                    .zip(xv)
                    .map(|(g, x)| g * gelu_derivative(*x))
                    .collect();
                accum(grads, *a, &da);
            }
            Op::LayerNormRows {
                input,
                gain,
                bias,
                eps,
            } => {
                let (m, n) = (node.value.rows(), node.value.cols());
                let x = self.nodes[*input].value.data();
                let g = self.nodes[*gain].value.data();
                let mut dx = vec![0.0; m * n];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                for i in 0..m {
                    let row = &x[i * n..(i + 1) * n];
                    let grow = &out_grad[i * n..(i + 1) * n];
                    let (mean, inv_std) = row_moments(row, *eps);
                    // dy = out_grad .* gain, applied to the normalized value
                    let mut dy_mean = 0.0;
                    let mut dy_xhat_mean = 0.0;
                    for j in 0..n {
                        let xhat = (row[j] - mean) * inv_std;
                        let dy = grow[j] * g[j];
                        dy_mean += dy;
                        dy_xhat_mean += dy * xhat;
                        dg[j] += grow[j] * xhat;
                        db[j] += grow[j];
                    }
                    dy_mean /= n as f64;
                    dy_xhat_mean /= n as f64;
                    for j in 0..n {
                        let xhat = (row[j] - mean) * inv_std;
                        let dy = grow[j] * g[j];
                        dx[i * n + j] = inv_std * (dy - dy_mean - xhat * dy_xhat_mean);
                    }
                }
                accum(grads, *input, &dx);
                accum(grads, *gain, &dg);
                accum(grads, *bias, &db);
            }
            Op::GatherRows(a, indices) => {
                let n = self.nodes[*a].value.cols();
                let mut da = vec![0.0; self.nodes[*a].value.len()];
                for (r, &ix) in indices.iter().enumerate() {
                    for j in 0..n {
                        da[ix * n + j] += out_grad[r * n + j];
                    }
                }
                accum(grads, *a, &da);
            }
            Op::ConcatRows(parts) => {
                let n = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pm = self.nodes[p].value.rows();
                    accum(grads, p, &out_grad[offset * n..(offset + pm) * n]);
                    offset += pm;
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let cols = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pn = self.nodes[p].value.cols();
                    let mut dp = vec![0.0; m * pn];
                    for i in 0..m {
                        dp[i * pn..(i + 1) * pn]
                            .copy_from_slice(&out_grad[i * cols + offset..i * cols + offset + pn]);
                    }
                    accum(grads, p, &dp);
                    offset += pn;
                }
            }
            Op::SliceCols(a, start, end) => {
                let (m, n) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                let w = end - start;
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + start..i * n + end]
                        .copy_from_slice(&out_grad[i * w..(i + 1) * w]);
                }
                accum(grads, *a, &da);
            }
            Op::SumAll(a) => {
                let da = vec![out_grad[0]; self.nodes[*a].value.len()];
                accum(grads, *a, &da);
            }
        }
    }
}

// ---- shared scalar kernels ----

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        orow.fill(0.0);
        for (l, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_COEF: f64 = 0.044715;

pub(crate) fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEF * x * x * x)).tanh())
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

// ---- finite differences ----

/// Rebuilds the graph from `bindings`, returning the scalar root to check.
pub type GraphBuilder<'a> =
    dyn Fn(&mut Graph, &HashMap<String, Tensor>) -> Result<NodeId, GraphError> + 'a;

/// Compares the analytic gradient of the named leaf against central finite
/// differences, entry by entry, and returns the worst relative error
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
///
/// The builder is re-run twice per entry with the entry displaced by
/// `±step`, so the check is independent of the backward pass it validates.
pub fn finite_difference_check(
    build: &GraphBuilder,
    bindings: &HashMap<String, Tensor>,
    leaf: &str,
    step: f64,
) -> Result<f64, GraphError> {
    let eval = |bound: &HashMap<String, Tensor>| -> Result<f64, GraphError> {
        let mut g = Graph::new();
        let root = build(&mut g, bound)?;
        Ok(g.value(root).item())
    };

    let mut graph = Graph::new();
    let root = build(&mut graph, bindings)?;
    graph.backward(root)?;
    let analytic = graph.leaf_grad(leaf)?.clone();

    let base = bindings
        .get(leaf)
        .ok_or_else(|| GraphError::UnknownLeaf(leaf.to_string()))?;
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = bindings.clone();
        plus.get_mut(leaf).unwrap().data_mut()[i] += step;
        let f_plus = eval(&plus)?;
        let mut minus = bindings.clone();
        minus.get_mut(leaf).unwrap().data_mut()[i] -= step;
        let f_minus = eval(&minus)?;
        let numeric = (f_plus - f_minus) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
