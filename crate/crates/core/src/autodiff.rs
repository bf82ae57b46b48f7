//! Dynamic-tape reverse-mode differentiation over [`Tensor2`] values.
//!
//! A [`Graph`] records every operation in execution order. Node ids are
//! indices into that record, so the record is already a topological order
//! and [`Graph::backward`] is a single reverse sweep.
//!
//! Broadcasting is limited to scalar scaling, adding a `1×n` row to every
//! row, and repeating router columns; every other op requires equal shapes.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor2};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, S),
    Tanh(NodeId),
    Gelu(NodeId),
    MeanRows(NodeId),
    SumAll(NodeId),
    SoftmaxRows(NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    RepeatCols(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    Gather(NodeId, Vec<usize>),
    CausalMask(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Tensor2<S>,
        inv_std: Vec<S>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<(usize, usize)>,
        probs: Tensor2<S>,
    },
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor2<S>,
    grad: Option<Tensor2<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// The operation record. Values are immutable once pushed.
#[derive(Clone, Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor2<S> {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated by the last [`Graph::backward`], if any reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor2<S>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor2<S>, op: Op<S>, parents: &[NodeId]) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a leaf. Leaves must be finite.
    pub fn leaf(&mut self, value: Tensor2<S>, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf tensor".into()));
        }
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor2<S>) -> Result<NodeId> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(v, Op::MatMulNt(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: NodeId, b: NodeId, f: impl Fn(S, S) -> S) -> Tensor2<S> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor2::from_vec(va.rows(), va.cols(), data).expect("shape checked")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("hadamard", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Hadamard(a, b), &[a, b]))
    }

    /// Adds a `1×n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(Error::dim("add_row", sa, sr));
        }
        let mut v = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..sa.0 {
            for (x, &y) in v.row_mut(i).iter_mut().zip(&r) {
                *x += y;
            }
        }
        Ok(self.push(v, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: NodeId, k: S) -> NodeId {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k), &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| gelu(x).0);
        self.push(v, Op::Gelu(a), &[a])
    }

    /// `m×n → 1×n` column means.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.rows() == 0 {
            return Err(Error::Contract("mean_rows of an empty matrix".into()));
        }
        let m = S::of(va.rows() as f64);
        let mut out = Tensor2::zeros(1, va.cols());
        for i in 0..va.rows() {
            for (o, &x) in out.data_mut().iter_mut().zip(va.row(i)) {
                *o += x;
            }
        }
        for o in out.data_mut() {
            *o /= m;
        }
        Ok(self.push(out, Op::MeanRows(a), &[a]))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        self.push(Tensor2::filled(1, 1, s), Op::SumAll(a), &[a])
    }

    /// Row-wise softmax with the row max subtracted. Entries equal to `-inf`
    /// (masked positions) map to exactly zero.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.cols() == 0 {
            return Err(Error::Contract("softmax over zero columns".into()));
        }
        let mut out = va.clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        Ok(self.push(out, Op::SoftmaxRows(a), &[a]))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), &[a])
    }

    /// Row-major reinterpretation with a new shape of equal size.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let v = self.value(a).reshaped(rows, cols)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// `m×n → m×(n·times)`, each column repeated `times` times in place.
    pub fn repeat_cols(&mut self, a: NodeId, times: usize) -> Result<NodeId> {
        if times == 0 {
            return Err(Error::Contract("repeat_cols with zero repetitions".into()));
        }
        let va = self.value(a);
        let v = Tensor2::from_fn(va.rows(), va.cols() * times, |i, j| va.get(i, j / times));
        Ok(self.push(v, Op::RepeatCols(a, times), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let cols = self.shape(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::dim("concat_rows", self.shape(first), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let v = Tensor2::from_vec(rows, cols, data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            cols += self.shape(p).1;
        }
        let mut out = Tensor2::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            for i in 0..rows {
                out.row_mut(i)[off..off + v.cols()].copy_from_slice(v.row(i));
            }
            off += v.cols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Rows `start..start+len`.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        if start + len > va.rows() || len == 0 {
            return Err(Error::dim("slice_rows", va.shape(), (start, len)));
        }
        let v = Tensor2::from_vec(
            len,
            va.cols(),
            va.data()[start * va.cols()..(start + len) * va.cols()].to_vec(),
        )?;
        Ok(self.push(v, Op::SliceRows(a, start), &[a]))
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        if start + len > va.cols() || len == 0 {
            return Err(Error::dim("slice_cols", va.shape(), (start, len)));
        }
        let v = Tensor2::from_fn(va.rows(), len, |i, j| va.get(i, start + j));
        Ok(self.push(v, Op::SliceCols(a, start), &[a]))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * vt.cols());
        for &id in ids {
            if id >= vt.rows() {
                return Err(Error::Contract(format!(
                    "row id {id} out of range for table with {} rows",
                    vt.rows()
                )));
            }
            data.extend_from_slice(vt.row(id));
        }
        let v = Tensor2::from_vec(ids.len(), vt.cols(), data)?;
        Ok(self.push(v, Op::Gather(table, ids.to_vec()), &[table]))
    }

    /// Sets entries above the diagonal to `-inf`.
    pub fn causal_mask(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for j in (i + 1)..v.cols() {
                v.set(i, j, S::neg_infinity());
            }
        }
        self.push(v, Op::CausalMask(a), &[a])
    }

    /// Per-row normalization followed by `gain ⊙ x̂ + bias` (both `1×n`).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gain), self.shape(bias));
        if sg != (1, sx.1) || sb != (1, sx.1) {
            return Err(Error::dim("layer_norm", sx, sg));
        }
        let vx = self.value(x);
        let n = S::of(sx.1 as f64);
        let eps = S::of(LAYER_NORM_EPS);
        let mut xhat = Tensor2::zeros(sx.0, sx.1);
        let mut inv_std = Vec::with_capacity(sx.0);
        for i in 0..sx.0 {
            let row = vx.row(i);
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let inv = S::one() / (var + eps).sqrt();
            for (h, &v) in xhat.row_mut(i).iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = xhat.clone();
        for i in 0..sx.0 {
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = *o * g[j] + b[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Mean negative log-likelihood of `targets` given as `(row, class)` pairs.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[(usize, usize)]) -> Result<NodeId> {
        if targets.is_empty() {
            return Err(Error::Contract("cross_entropy with an empty mask".into()));
        }
        let vl = self.value(logits);
        let mut probs = Tensor2::zeros(targets.len(), vl.cols());
        let mut total = S::zero();
        for (k, &(row, class)) in targets.iter().enumerate() {
            if row >= vl.rows() || class >= vl.cols() {
                return Err(Error::Contract(format!(
                    "cross_entropy target ({row}, {class}) outside logits {:?}",
                    vl.shape()
                )));
            }
            let r = vl.row(row);
            let max = r.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
            let lse = r.iter().map(|&x| (x - max).exp()).sum::<S>().ln() + max;
            total += lse - r[class];
            for (p, &x) in probs.row_mut(k).iter_mut().zip(r) {
                *p = (x - lse).exp();
            }
        }
        let loss = total / S::of(targets.len() as f64);
        Ok(self.push(
            Tensor2::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar root. Gradients accumulate additively across
    /// fan-out and land on every reachable node with `requires_grad`.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.shape(root) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward root must be 1x1, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor2<S>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor2::filled(1, 1, S::one()));
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = if node.requires_grad { g } else { None };
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &Tensor2<S>, grads: &mut [Option<Tensor2<S>>]) {
        let node = &self.nodes[idx];
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    let acc = slot(grads, *a, val(*a).shape());
                    gemm_nt(g, val(*b), acc);
                }
                if needs(*b) {
                    let acc = slot(grads, *b, val(*b).shape());
                    gemm_tn(val(*a), g, acc);
                }
            }
            Op::MatMulNt(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                if needs(*a) {
                    let acc = slot(grads, *a, val(*a).shape());
                    gemm_nn(g, val(*b), acc);
                }
                if needs(*b) {
                    let acc = slot(grads, *b, val(*b).shape());
                    gemm_tn(g, val(*a), acc);
                }
            }
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if needs(p) {
                        slot(grads, p, g.shape()).add_assign(g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    slot(grads, *a, g.shape()).add_assign(g);
                }
                if needs(*b) {
                    let acc = slot(grads, *b, g.shape());
                    for (o, &x) in acc.data_mut().iter_mut().zip(g.data()) {
                        *o -= x;
                    }
                }
            }
            Op::Hadamard(a, b) => {
                for (p, q) in [(*a, *b), (*b, *a)] {
                    if needs(p) {
                        let other = val(q);
                        let acc = slot(grads, p, g.shape());
                        for ((o, &x), &y) in acc.data_mut().iter_mut().zip(g.data()).zip(other.data()) {
                            *o += x * y;
                        }
                    }
                }
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    slot(grads, *a, g.shape()).add_assign(g);
                }
                if needs(*row) {
                    let acc = slot(grads, *row, (1, g.cols()));
                    for i in 0..g.rows() {
                        for (o, &x) in acc.data_mut().iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Scale(a, k) => {
                if needs(*a) {
                    let acc = slot(grads, *a, g.shape());
                    for (o, &x) in acc.data_mut().iter_mut().zip(g.data()) {
                        *o += x * *k;
                    }
                }
            }
            Op::Tanh(a) => {
                if needs(*a) {
                    let y = &node.value;
                    let acc = slot(grads, *a, g.shape());
                    for ((o, &x), &t) in acc.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += x * (S::one() - t * t);
                    }
                }
            }
            Op::Gelu(a) => {
                if needs(*a) {
                    let input = val(*a);
                    let acc = slot(grads, *a, g.shape());
                    for ((o, &x), &z) in acc.data_mut().iter_mut().zip(g.data()).zip(input.data()) {
                        *o += x * gelu(z).1;
                    }
                }
            }
            Op::MeanRows(a) => {
                if needs(*a) {
                    let shape = val(*a).shape();
                    let inv = S::one() / S::of(shape.0 as f64);
                    let acc = slot(grads, *a, shape);
                    for i in 0..shape.0 {
                        for (o, &x) in acc.row_mut(i).iter_mut().zip(g.data()) {
                            *o += x * inv;
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if needs(*a) {
                    let shape = val(*a).shape();
                    let s = g.data()[0];
                    for o in slot(grads, *a, shape).data_mut() {
                        *o += s;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if needs(*a) {
                    let y = &node.value;
                    let acc = slot(grads, *a, g.shape());
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let dot: S = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for ((o, &p), &q) in acc.row_mut(i).iter_mut().zip(yr).zip(gr) {
                            *o += p * (q - dot);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    let gt = g.transpose();
                    slot(grads, *a, gt.shape()).add_assign(&gt);
                }
            }
            Op::Reshape(a) => {
                if needs(*a) {
                    let shape = val(*a).shape();
                    let acc = slot(grads, *a, shape);
                    for (o, &x) in acc.data_mut().iter_mut().zip(g.data()) {
                        *o += x;
                    }
                }
            }
            Op::RepeatCols(a, times) => {
                if needs(*a) {
                    let shape = val(*a).shape();
                    let acc = slot(grads, *a, shape);
                    for i in 0..g.rows() {
                        for (j, &x) in g.row(i).iter().enumerate() {
                            acc.row_mut(i)[j / times] += x;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    if needs(p) {
                        let acc = slot(grads, p, (r, c));
                        for (o, &x) in acc.data_mut().iter_mut().zip(&g.data()[off * c..(off + r) * c]) {
                            *o += x;
                        }
                    }
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    if needs(p) {
                        let acc = slot(grads, p, (r, c));
                        for i in 0..r {
                            for (o, &x) in acc.row_mut(i).iter_mut().zip(&g.row(i)[off..off + c]) {
                                *o += x;
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::SliceRows(a, start) => {
                if needs(*a) {
                    let shape = val(*a).shape();
                    let acc = slot(grads, *a, shape);
                    let c = shape.1;
                    for (o, &x) in acc.data_mut()[start * c..].iter_mut().zip(g.data()) {
                        *o += x;
                    }
                }
            }
            Op::SliceCols(a, start) => {
                if needs(*a) {
                    let shape = val(*a).shape();
                    let acc = slot(grads, *a, shape);
                    for i in 0..g.rows() {
                        for (o, &x) in acc.row_mut(i)[*start..].iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Gather(table, ids) => {
                if needs(*table) {
                    let shape = val(*table).shape();
                    let acc = slot(grads, *table, shape);
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, &x) in acc.row_mut(id).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::CausalMask(a) => {
                if needs(*a) {
                    let acc = slot(grads, *a, g.shape());
                    for i in 0..g.rows() {
                        let keep = (i + 1).min(g.cols());
                        for (o, &x) in acc.row_mut(i)[..keep].iter_mut().zip(&g.row(i)[..keep]) {
                            *o += x;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = val(*gain).data();
                let n = S::of(g.cols() as f64);
                if needs(*gain) {
                    let acc = slot(grads, *gain, (1, g.cols()));
                    for i in 0..g.rows() {
                        for ((o, &d), &h) in acc.data_mut().iter_mut().zip(g.row(i)).zip(xhat.row(i)) {
                            *o += d * h;
                        }
                    }
                }
                if needs(*bias) {
                    let acc = slot(grads, *bias, (1, g.cols()));
                    for i in 0..g.rows() {
                        for (o, &d) in acc.data_mut().iter_mut().zip(g.row(i)) {
                            *o += d;
                        }
                    }
                }
                if needs(*x) {
                    let acc = slot(grads, *x, g.shape());
                    let mut dxhat = vec![S::zero(); g.cols()];
                    for i in 0..g.rows() {
                        for ((d, &gg), &w) in dxhat.iter_mut().zip(g.row(i)).zip(gv) {
                            *d = gg * w;
                        }
                        let h = xhat.row(i);
                        let mean_d = dxhat.iter().copied().sum::<S>() / n;
                        let mean_dh = dxhat.iter().zip(h).map(|(&d, &hh)| d * hh).sum::<S>() / n;
                        for ((o, &d), &hh) in acc.row_mut(i).iter_mut().zip(&dxhat).zip(h) {
                            *o += inv_std[i] * (d - mean_d - hh * mean_dh);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if needs(*logits) {
                    let shape = val(*logits).shape();
                    let scale = g.data()[0] / S::of(targets.len() as f64);
                    let acc = slot(grads, *logits, shape);
                    for (k, &(row, class)) in targets.iter().enumerate() {
                        let out = acc.row_mut(row);
                        for (o, &p) in out.iter_mut().zip(probs.row(k)) {
                            *o += p * scale;
                        }
                        out[class] -= scale;
                    }
                }
            }
        }
    }
}

fn slot<S: Scalar>(
    grads: &mut [Option<Tensor2<S>>],
    id: NodeId,
    shape: (usize, usize),
) -> &mut Tensor2<S> {
    grads[id.0].get_or_insert_with(|| Tensor2::zeros(shape.0, shape.1))
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
    let mut total = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// GELU value and derivative, tanh approximation.
fn gelu<S: Scalar>(x: S) -> (S, S) {
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let k = S::of(0.044715);
    let half = S::of(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let value = half * x * (S::one() + t);
    let deriv = half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::of(3.0) * k * x * x);
    (value, deriv)
}
