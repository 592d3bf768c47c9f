//! Define-by-run operation graph with a single reverse sweep.
//!
//! Nodes are appended in construction order, so the node list is already a
//! topological order and `backward` walks it once in reverse. Values are
//! computed eagerly at insertion; intermediate values may be non-finite,
//! callers decide where finiteness matters.

use std::collections::{BTreeMap, BTreeSet};

use super::{Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf(String),
    Constant,
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    ScaleBy { x: NodeId, s: NodeId },
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    ConcatCols(NodeId, NodeId),
    ConcatRows(NodeId, NodeId),
    StackRows(Vec<NodeId>),
    Row { x: NodeId, index: usize },
    GatherRows { x: NodeId, indices: Vec<usize> },
    GatherCols { x: NodeId, indices: Vec<usize> },
    MeanRows(NodeId),
    Sum(NodeId),
    Entry { x: NodeId, row: usize, col: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to named leaves.
///
/// Every leaf created with `requires_grad` has an entry, including leaves
/// the loss never touched; those carry exact zeros.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.by_name
    }
}

/// Operation tape. Build values through the methods below, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: BTreeSet<String>,
}

fn matmul_raw(a: &[f64], ra: usize, ca: usize, b: &[f64], cb: usize) -> Vec<f64> {
    let mut out = vec![0.0; ra * cb];
    for i in 0..ra {
        let arow = &a[i * ca..(i + 1) * ca];
        let orow = &mut out[i * cb..(i + 1) * cb];
        for (k, &av) in arow.iter().enumerate() {
            let brow = &b[k * cb..(k + 1) * cb];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], delta: Vec<f64>) {
    match slot {
        Some(t) => {
            for (dst, d) in t.data.iter_mut().zip(delta) {
                *dst += d;
            }
        }
        None => {
            *slot = Some(Tensor {
                shape: shape.to_vec(),
                data: delta,
                requires_grad: false,
            })
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            op,
            value: Tensor {
                shape,
                data,
                requires_grad: false,
            },
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Register a named input. The tensor's `requires_grad` flag decides
    /// whether `backward` reports a gradient for it. Names must be unique
    /// within a graph.
    pub fn leaf(&mut self, name: &str, value: &Tensor) -> Result<NodeId, TensorError> {
        if !self.leaves.insert(name.to_string()) {
            return Err(TensorError::DuplicateLeaf {
                name: name.to_string(),
            });
        }
        let needs = value.requires_grad();
        Ok(self.push(
            Op::Leaf(name.to_string()),
            value.shape().to_vec(),
            value.data().to_vec(),
            needs,
        ))
    }

    /// Register a value that never receives a gradient.
    pub fn constant(&mut self, value: &Tensor) -> NodeId {
        self.push(
            Op::Constant,
            value.shape().to_vec(),
            value.data().to_vec(),
            false,
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ra, ca) = self.value(a).dims2("matmul")?;
        let (rb, cb) = self.value(b).dims2("matmul")?;
        if ca != rb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![ra, ca],
                rhs: vec![rb, cb],
            });
        }
        let data = matmul_raw(self.value(a).data(), ra, ca, self.value(b).data(), cb);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), vec![ra, cb], data, needs))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = self.value(x).dims2("transpose")?;
        let data = transpose_raw(self.value(x).data(), r, c);
        let needs = self.needs(x);
        Ok(self.push(Op::Transpose(x), vec![c, r], data, needs))
    }

    fn elementwise_pair(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>, bool), TensorError> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok((ta.shape().to_vec(), data, self.needs(a) || self.needs(b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (shape, data, needs) = self.elementwise_pair("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), shape, data, needs))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (shape, data, needs) = self.elementwise_pair("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), shape, data, needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (shape, data, needs) = self.elementwise_pair("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), shape, data, needs))
    }

    /// Multiply every entry by a fixed constant.
    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId, TensorError> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Op::Scale(x, factor), shape, data, needs))
    }

    /// Multiply every entry by a 1x1 node; the scalar also receives a
    /// gradient.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, TensorError> {
        let st = self.value(s);
        if st.shape() != [1, 1] {
            return Err(TensorError::ShapeMismatch {
                op: "scale_by",
                lhs: st.shape().to_vec(),
                rhs: vec![1, 1],
            });
        }
        let factor = st.data()[0];
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(Op::ScaleBy { x, s }, shape, data, needs))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = self.value(x).dims2("softmax_rows")?;
        if c == 0 {
            return Err(TensorError::EmptyRows { op: "softmax_rows" });
        }
        let xd = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - m).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::SoftmaxRows(x), vec![r, c], data, needs))
    }

    /// Row-wise log-softmax. Entries are guaranteed non-positive, so a
    /// negative-log-likelihood built on top cannot go below zero even in
    /// floating point.
    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = self.value(x).dims2("log_softmax_rows")?;
        if c == 0 {
            return Err(TensorError::EmptyRows {
                op: "log_softmax_rows",
            });
        }
        let xd = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + sum.ln();
            for (o, &v) in data[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::LogSoftmaxRows(x), vec![r, c], data, needs))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Op::Sigmoid(x), shape, data, needs))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.max(0.0)).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Op::Relu(x), shape, data, needs))
    }

    /// Horizontal concatenation `[A | B]`; row counts must match. Either
    /// side may have zero columns.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ra, ca) = self.value(a).dims2("concat_cols")?;
        let (rb, cb) = self.value(b).dims2("concat_cols")?;
        if ra != rb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: vec![ra, ca],
                rhs: vec![rb, cb],
            });
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(&ad[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&bd[i * cb..(i + 1) * cb]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::ConcatCols(a, b), vec![ra, ca + cb], data, needs))
    }

    /// Vertical concatenation `[A ; B]`; column counts must match.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ra, ca) = self.value(a).dims2("concat_rows")?;
        let (rb, cb) = self.value(b).dims2("concat_rows")?;
        if ca != cb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                lhs: vec![ra, ca],
                rhs: vec![rb, cb],
            });
        }
        let mut data = Vec::with_capacity((ra + rb) * ca);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::ConcatRows(a, b), vec![ra + rb, ca], data, needs))
    }

    /// Stack single-row nodes into a matrix, one input per output row.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId, TensorError> {
        if rows.is_empty() {
            return Err(TensorError::EmptyStack);
        }
        let (r0, c0) = self.value(rows[0]).dims2("stack_rows")?;
        if r0 != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "stack_rows",
                lhs: vec![r0, c0],
                rhs: vec![1, c0],
            });
        }
        let mut data = Vec::with_capacity(rows.len() * c0);
        let mut needs = false;
        for &id in rows {
            let (ri, ci) = self.value(id).dims2("stack_rows")?;
            if ri != 1 || ci != c0 {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![ri, ci],
                    rhs: vec![1, c0],
                });
            }
            data.extend_from_slice(self.value(id).data());
            needs |= self.needs(id);
        }
        Ok(self.push(
            Op::StackRows(rows.to_vec()),
            vec![rows.len(), c0],
            data,
            needs,
        ))
    }

    /// Select one row as a 1xC node.
    pub fn row(&mut self, x: NodeId, index: usize) -> Result<NodeId, TensorError> {
        let (r, c) = self.value(x).dims2("row")?;
        if index >= r {
            return Err(TensorError::IndexOutOfRange {
                op: "row",
                index,
                limit: r,
            });
        }
        let data = self.value(x).data()[index * c..(index + 1) * c].to_vec();
        let needs = self.needs(x);
        Ok(self.push(Op::Row { x, index }, vec![1, c], data, needs))
    }

    /// Row lookup table: output row i is input row `indices[i]`. Repeated
    /// indices are allowed; their gradients accumulate.
    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId, TensorError> {
        let (r, c) = self.value(x).dims2("gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                limit: r,
            });
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
            vec![indices.len(), c],
            data,
            needs,
        ))
    }

    /// Column selection: output column j is input column `indices[j]`.
    pub fn gather_cols(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId, TensorError> {
        let (r, c) = self.value(x).dims2("gather_cols")?;
        if let Some(&bad) = indices.iter().find(|&&j| j >= c) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_cols",
                index: bad,
                limit: c,
            });
        }
        let xd = self.value(x).data();
        let k = indices.len();
        let mut data = Vec::with_capacity(r * k);
        for i in 0..r {
            for &j in indices {
                data.push(xd[i * c + j]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Op::GatherCols {
                x,
                indices: indices.to_vec(),
            },
            vec![r, k],
            data,
            needs,
        ))
    }

    /// Column means over all rows, as a 1xC node.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = self.value(x).dims2("mean_rows")?;
        if r == 0 {
            return Err(TensorError::EmptyRows { op: "mean_rows" });
        }
        let xd = self.value(x).data();
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += xd[i * c + j];
            }
        }
        for v in data.iter_mut() {
            *v /= r as f64;
        }
        let needs = self.needs(x);
        Ok(self.push(Op::MeanRows(x), vec![1, c], data, needs))
    }

    /// Sum of every entry, as a 1x1 node.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let t = self.value(x);
        t.dims2("sum")?;
        let total: f64 = t.data().iter().sum();
        let needs = self.needs(x);
        Ok(self.push(Op::Sum(x), vec![1, 1], vec![total], needs))
    }

    /// Single entry as a 1x1 node.
    pub fn entry(&mut self, x: NodeId, row: usize, col: usize) -> Result<NodeId, TensorError> {
        let (r, c) = self.value(x).dims2("entry")?;
        if row >= r {
            return Err(TensorError::IndexOutOfRange {
                op: "entry",
                index: row,
                limit: r,
            });
        }
        if col >= c {
            return Err(TensorError::IndexOutOfRange {
                op: "entry",
                index: col,
                limit: c,
            });
        }
        let v = self.value(x).data()[row * c + col];
        let needs = self.needs(x);
        Ok(self.push(Op::Entry { x, row, col }, vec![1, 1], vec![v], needs))
    }

    /// Reverse sweep from a 1x1 loss node. Returns one gradient per
    /// `requires_grad` leaf; leaves the loss does not reach get exact zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        let lt = self.value(loss);
        if lt.shape() != [1, 1] {
            return Err(TensorError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf(_) => {
                    grads[id] = Some(g);
                }
                Op::Constant => {}
                Op::Matmul(a, b) => {
                    let (ra, ca) = (self.value(*a).rows(), self.value(*a).cols());
                    let cb = self.value(*b).cols();
                    if self.needs(*a) {
                        let bt = transpose_raw(self.value(*b).data(), ca, cb);
                        let da = matmul_raw(g.data(), ra, cb, &bt, ca);
                        accumulate(&mut grads[a.0], &[ra, ca], da);
                    }
                    if self.needs(*b) {
                        let at = transpose_raw(self.value(*a).data(), ra, ca);
                        let db = matmul_raw(&at, ca, ra, g.data(), cb);
                        accumulate(&mut grads[b.0], &[ca, cb], db);
                    }
                }
                Op::Transpose(x) => {
                    if self.needs(*x) {
                        let (r, c) = (self.value(*x).rows(), self.value(*x).cols());
                        let dx = transpose_raw(g.data(), c, r);
                        accumulate(&mut grads[x.0], &[r, c], dx);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g.shape(), g.data().to_vec());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], g.shape(), g.data().to_vec());
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g.shape(), g.data().to_vec());
                    }
                    if self.needs(*b) {
                        let neg = g.data().iter().map(|v| -v).collect();
                        accumulate(&mut grads[b.0], g.shape(), neg);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let da = g
                            .data()
                            .iter()
                            .zip(self.value(*b).data())
                            .map(|(gv, bv)| gv * bv)
                            .collect();
                        accumulate(&mut grads[a.0], g.shape(), da);
                    }
                    if self.needs(*b) {
                        let db = g
                            .data()
                            .iter()
                            .zip(self.value(*a).data())
                            .map(|(gv, av)| gv * av)
                            .collect();
                        accumulate(&mut grads[b.0], g.shape(), db);
                    }
                }
                Op::Scale(x, factor) => {
                    if self.needs(*x) {
                        let dx = g.data().iter().map(|v| v * factor).collect();
                        accumulate(&mut grads[x.0], g.shape(), dx);
                    }
                }
                Op::ScaleBy { x, s } => {
                    let factor = self.value(*s).data()[0];
                    if self.needs(*x) {
                        let dx = g.data().iter().map(|v| v * factor).collect();
                        accumulate(&mut grads[x.0], g.shape(), dx);
                    }
                    if self.needs(*s) {
                        let ds: f64 = g
                            .data()
                            .iter()
                            .zip(self.value(*x).data())
                            .map(|(gv, xv)| gv * xv)
                            .sum();
                        accumulate(&mut grads[s.0], &[1, 1], vec![ds]);
                    }
                }
                Op::SoftmaxRows(x) => {
                    if self.needs(*x) {
                        let (r, c) = (node.value.rows(), node.value.cols());
                        let y = node.value.data();
                        let mut dx = vec![0.0; r * c];
                        for i in 0..r {
                            let yr = &y[i * c..(i + 1) * c];
                            let gr = &g.data()[i * c..(i + 1) * c];
                            let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                            for ((d, &yv), &gv) in dx[i * c..(i + 1) * c].iter_mut().zip(yr).zip(gr)
                            {
                                *d = yv * (gv - dot);
                            }
                        }
                        accumulate(&mut grads[x.0], &[r, c], dx);
                    }
                }
                Op::LogSoftmaxRows(x) => {
                    if self.needs(*x) {
                        let (r, c) = (node.value.rows(), node.value.cols());
                        let y = node.value.data();
                        let mut dx = vec![0.0; r * c];
                        for i in 0..r {
                            let yr = &y[i * c..(i + 1) * c];
                            let gr = &g.data()[i * c..(i + 1) * c];
                            let gsum: f64 = gr.iter().sum();
                            for ((d, &yv), &gv) in dx[i * c..(i + 1) * c].iter_mut().zip(yr).zip(gr)
                            {
                                *d = gv - yv.exp() * gsum;
                            }
                        }
                        accumulate(&mut grads[x.0], &[r, c], dx);
                    }
                }
                Op::Sigmoid(x) => {
                    if self.needs(*x) {
                        let dx = g
                            .data()
                            .iter()
                            .zip(node.value.data())
                            .map(|(gv, yv)| gv * yv * (1.0 - yv))
                            .collect();
                        accumulate(&mut grads[x.0], g.shape(), dx);
                    }
                }
                Op::Relu(x) => {
                    if self.needs(*x) {
                        let dx = g
                            .data()
                            .iter()
                            .zip(self.value(*x).data())
                            .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                            .collect();
                        accumulate(&mut grads[x.0], g.shape(), dx);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (ra, ca) = (self.value(*a).rows(), self.value(*a).cols());
                    let cb = self.value(*b).cols();
                    let total = ca + cb;
                    if self.needs(*a) {
                        let mut da = Vec::with_capacity(ra * ca);
                        for i in 0..ra {
                            da.extend_from_slice(&g.data()[i * total..i * total + ca]);
                        }
                        accumulate(&mut grads[a.0], &[ra, ca], da);
                    }
                    if self.needs(*b) {
                        let mut db = Vec::with_capacity(ra * cb);
                        for i in 0..ra {
                            db.extend_from_slice(&g.data()[i * total + ca..(i + 1) * total]);
                        }
                        accumulate(&mut grads[b.0], &[ra, cb], db);
                    }
                }
                Op::ConcatRows(a, b) => {
                    let (ra, ca) = (self.value(*a).rows(), self.value(*a).cols());
                    let rb = self.value(*b).rows();
                    if self.needs(*a) {
                        let da = g.data()[..ra * ca].to_vec();
                        accumulate(&mut grads[a.0], &[ra, ca], da);
                    }
                    if self.needs(*b) {
                        let db = g.data()[ra * ca..].to_vec();
                        accumulate(&mut grads[b.0], &[rb, ca], db);
                    }
                }
                Op::StackRows(rows) => {
                    let c = node.value.cols();
                    for (i, &rid) in rows.iter().enumerate() {
                        if self.needs(rid) {
                            let dr = g.data()[i * c..(i + 1) * c].to_vec();
                            accumulate(&mut grads[rid.0], &[1, c], dr);
                        }
                    }
                }
                Op::Row { x, index } => {
                    if self.needs(*x) {
                        let (r, c) = (self.value(*x).rows(), self.value(*x).cols());
                        let mut dx = vec![0.0; r * c];
                        dx[index * c..(index + 1) * c].copy_from_slice(g.data());
                        accumulate(&mut grads[x.0], &[r, c], dx);
                    }
                }
                Op::GatherRows { x, indices } => {
                    if self.needs(*x) {
                        let (r, c) = (self.value(*x).rows(), self.value(*x).cols());
                        let mut dx = vec![0.0; r * c];
                        for (i, &src) in indices.iter().enumerate() {
                            for j in 0..c {
                                dx[src * c + j] += g.data()[i * c + j];
                            }
                        }
                        accumulate(&mut grads[x.0], &[r, c], dx);
                    }
                }
                Op::GatherCols { x, indices } => {
                    if self.needs(*x) {
                        let (r, c) = (self.value(*x).rows(), self.value(*x).cols());
                        let k = indices.len();
                        let mut dx = vec![0.0; r * c];
                        for i in 0..r {
                            for (j, &src) in indices.iter().enumerate() {
                                dx[i * c + src] += g.data()[i * k + j];
                            }
                        }
                        accumulate(&mut grads[x.0], &[r, c], dx);
                    }
                }
                Op::MeanRows(x) => {
                    if self.needs(*x) {
                        let (r, c) = (self.value(*x).rows(), self.value(*x).cols());
                        let inv = 1.0 / r as f64;
                        let mut dx = Vec::with_capacity(r * c);
                        for _ in 0..r {
                            dx.extend(g.data().iter().map(|v| v * inv));
                        }
                        accumulate(&mut grads[x.0], &[r, c], dx);
                    }
                }
                Op::Sum(x) => {
                    if self.needs(*x) {
                        let t = self.value(*x);
                        let g0 = g.data()[0];
                        accumulate(&mut grads[x.0], t.shape(), vec![g0; t.len()]);
                    }
                }
                Op::Entry { x, row, col } => {
                    if self.needs(*x) {
                        let (r, c) = (self.value(*x).rows(), self.value(*x).cols());
                        let mut dx = vec![0.0; r * c];
                        dx[row * c + col] = g.data()[0];
                        accumulate(&mut grads[x.0], &[r, c], dx);
                    }
                }
            }
        }

        let mut by_name = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(name) = &node.op {
                if node.needs_grad {
                    let g = grads[idx].take().unwrap_or_else(|| Tensor {
                        shape: node.value.shape().to_vec(),
                        data: vec![0.0; node.value.len()],
                        requires_grad: false,
                    });
                    by_name.insert(name.clone(), g);
                }
            }
        }
        Ok(Gradients { by_name })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, name: &str, rows: usize, cols: usize, data: Vec<f64>) -> NodeId {
        let t = Tensor::matrix(rows, cols, data).unwrap().with_grad();
        g.leaf(name, &t).unwrap()
    }

    #[test]
    fn matmul_known_product() {
        let mut g = Graph::new();
        let a = leaf(&mut g, "a", 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut g, "b", 2, 2, vec![5.0, 6.0, 7.0, 8.0]);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch_rejected() {
        let mut g = Graph::new();
        let a = leaf(&mut g, "a", 2, 3, vec![0.0; 6]);
        let b = leaf(&mut g, "b", 2, 2, vec![0.0; 4]);
        assert!(matches!(
            g.matmul(a, b),
            Err(TensorError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn matmul_backward_matches_hand_calc() {
        // loss = sum(A.B) with A = [[1,2],[3,4]], B = [[5,6],[7,8]].
        // dA = ones.B^T = [[11,15],[11,15]], dB = A^T.ones = [[4,4],[6,6]].
        let mut g = Graph::new();
        let a = leaf(&mut g, "a", 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut g, "b", 2, 2, vec![5.0, 6.0, 7.0, 8.0]);
        let c = g.matmul(a, b).unwrap();
        let loss = g.sum(c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("a").unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.get("b").unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn softmax_two_entry_row() {
        // softmax([0, ln 3]) = [1/4, 3/4].
        let mut g = Graph::new();
        let x = leaf(&mut g, "x", 1, 2, vec![0.0, 3.0f64.ln()]);
        let s = g.softmax_rows(x).unwrap();
        let v = g.value(s).data();
        assert!((v[0] - 0.25).abs() < 1e-15);
        assert!((v[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one_under_extreme_values() {
        let mut g = Graph::new();
        let x = leaf(
            &mut g,
            "x",
            2,
            3,
            vec![1e308, 1.0, -1e308, -745.0, 0.0, 710.0],
        );
        let s = g.softmax_rows(x).unwrap();
        for i in 0..2 {
            let row = &g.value(s).data()[i * 3..(i + 1) * 3];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
            assert!(row.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn log_softmax_uniform_row() {
        let mut g = Graph::new();
        let x = leaf(&mut g, "x", 1, 4, vec![2.0; 4]);
        let ls = g.log_softmax_rows(x).unwrap();
        for &v in g.value(ls).data() {
            assert!((v - (-(4.0f64.ln()))).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_entries_never_positive() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-600.0..600.0)).collect();
            let mut g = Graph::new();
            let x = leaf(&mut g, "x", 3, 4, data);
            let ls = g.log_softmax_rows(x).unwrap();
            assert!(g.value(ls).data().iter().all(|&v| v <= 0.0));
        }
    }

    #[test]
    fn sigmoid_at_zero_and_its_slope() {
        let mut g = Graph::new();
        let x = leaf(&mut g, "x", 1, 1, vec![0.0]);
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).data()[0], 0.5);
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data()[0], 0.25);
    }

    #[test]
    fn relu_masks_gradient() {
        let mut g = Graph::new();
        let x = leaf(&mut g, "x", 1, 3, vec![-2.0, 0.0, 5.0]);
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 5.0]);
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_layouts() {
        let mut g = Graph::new();
        let a = leaf(&mut g, "a", 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut g, "b", 2, 1, vec![5.0, 6.0]);
        let cc = g.concat_cols(a, b).unwrap();
        assert_eq!(g.value(cc).shape(), &[2, 3]);
        assert_eq!(g.value(cc).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);

        let c = leaf(&mut g, "c", 1, 2, vec![7.0, 8.0]);
        let cr = g.concat_rows(a, c).unwrap();
        assert_eq!(g.value(cr).shape(), &[3, 2]);
        assert_eq!(g.value(cr).data(), &[1.0, 2.0, 3.0, 4.0, 7.0, 8.0]);
    }

    #[test]
    fn concat_cols_with_empty_side_is_identity() {
        let mut g = Graph::new();
        let a = leaf(&mut g, "a", 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let empty = g.constant(&Tensor::matrix(2, 0, vec![]).unwrap());
        let c = g.concat_cols(a, empty).unwrap();
        assert!(g.value(c).bit_eq(g.value(a)));
    }

    #[test]
    fn concat_backward_splits_gradient() {
        let mut g = Graph::new();
        let a = leaf(&mut g, "a", 1, 2, vec![1.0, 2.0]);
        let b = leaf(&mut g, "b", 1, 1, vec![3.0]);
        let c = g.concat_cols(a, b).unwrap();
        let w = g.constant(&Tensor::matrix(3, 1, vec![10.0, 20.0, 30.0]).unwrap());
        let y = g.matmul(c, w).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("a").unwrap().data(), &[10.0, 20.0]);
        assert_eq!(grads.get("b").unwrap().data(), &[30.0]);
    }

    #[test]
    fn gather_rows_accumulates_repeated_indices() {
        let mut g = Graph::new();
        let x = leaf(&mut g, "x", 2, 1, vec![4.0, 9.0]);
        let y = g.gather_rows(x, &[0, 0, 1]).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 4.0, 9.0]);
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[2.0, 1.0]);
    }

    #[test]
    fn gather_cols_selects_and_routes_gradient() {
        let mut g = Graph::new();
        let x = leaf(&mut g, "x", 1, 4, vec![10.0, 11.0, 12.0, 13.0]);
        let y = g.gather_cols(x, &[3, 1]).unwrap();
        assert_eq!(g.value(y).data(), &[13.0, 11.0]);
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn mean_rows_and_backward() {
        let mut g = Graph::new();
        let x = leaf(&mut g, "x", 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let m = g.mean_rows(x).unwrap();
        assert_eq!(g.value(m).data(), &[2.0, 3.0]);
        let loss = g.sum(m).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn entry_and_scale_by() {
        let mut g = Graph::new();
        let x = leaf(&mut g, "x", 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let s = g.entry(x, 1, 0).unwrap();
        assert_eq!(g.value(s).data(), &[3.0]);
        let y = leaf(&mut g, "y", 1, 2, vec![10.0, 20.0]);
        let scaled = g.scale_by(y, s).unwrap();
        assert_eq!(g.value(scaled).data(), &[30.0, 60.0]);
        let loss = g.sum(scaled).unwrap();
        let grads = g.backward(loss).unwrap();
        // d loss / ds = 10 + 20, routed to x[1,0] only.
        assert_eq!(grads.get("x").unwrap().data(), &[0.0, 0.0, 30.0, 0.0]);
        assert_eq!(grads.get("y").unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn unreached_leaf_gets_exact_zero_gradient() {
        let mut g = Graph::new();
        let x = leaf(&mut g, "x", 1, 2, vec![1.0, 2.0]);
        let unused = leaf(&mut g, "unused", 2, 2, vec![1.0; 4]);
        let _ = unused;
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        let z = grads.get("unused").unwrap();
        assert_eq!(z.shape(), &[2, 2]);
        assert!(z.data().iter().all(|v| v.to_bits() == 0.0f64.to_bits()));
    }

    #[test]
    fn constants_receive_no_gradient_entry() {
        let mut g = Graph::new();
        let x = leaf(&mut g, "x", 1, 2, vec![1.0, 2.0]);
        let c = g.constant(&Tensor::matrix(1, 2, vec![5.0, 5.0]).unwrap());
        let y = g.mul(x, c).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads.get("x").unwrap().data(), &[5.0, 5.0]);
    }

    #[test]
    fn duplicate_leaf_name_rejected() {
        let mut g = Graph::new();
        let t = Tensor::scalar(1.0);
        g.leaf("p", &t).unwrap();
        assert!(matches!(
            g.leaf("p", &t),
            Err(TensorError::DuplicateLeaf { .. })
        ));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = leaf(&mut g, "x", 1, 2, vec![1.0, 2.0]);
        assert!(matches!(
            g.backward(x),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn shared_node_gradients_accumulate() {
        // loss = sum(x) + sum(x) so dx = 2 everywhere.
        let mut g = Graph::new();
        let x = leaf(&mut g, "x", 1, 2, vec![1.0, 2.0]);
        let s1 = g.sum(x).unwrap();
        let s2 = g.sum(x).unwrap();
        let loss = g.add(s1, s2).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn identical_graphs_are_bitwise_reproducible() {
        let build = || {
            let x = Tensor::matrix(2, 3, vec![0.3, -1.7, 2.9, 0.01, 44.0, -0.5])
                .unwrap()
                .with_grad();
            let w = Tensor::matrix(3, 2, vec![1.5, -2.5, 0.25, 8.0, -0.125, 3.0]).unwrap();
            let mut g = Graph::new();
            let xi = g.leaf("x", &x).unwrap();
            let wi = g.constant(&w);
            let h = g.matmul(xi, wi).unwrap();
            let s = g.softmax_rows(h).unwrap();
            let loss = g.sum(s).unwrap();
            let out = g.value(loss).clone();
            let grads = g.backward(loss).unwrap();
            (out, grads.get("x").unwrap().clone())
        };
        let (v1, g1) = build();
        let (v2, g2) = build();
        assert!(v1.bit_eq(&v2));
        assert!(g1.bit_eq(&g2));
    }
}
