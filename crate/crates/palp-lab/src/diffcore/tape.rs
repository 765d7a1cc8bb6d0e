//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Operations are recorded in execution order; the tape is therefore
//! topologically ordered by construction and a single reverse sweep computes
//! exact gradients of a scalar root with respect to any recorded leaf.
//!
//! Single-threaded per tape. Node values are immutable once recorded;
//! distinct tapes share no state and may live on distinct threads.

use super::tensor::{self, Tensor};
use thiserror::Error;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Error, PartialEq)]
pub enum GradError {
    #[error("gradient root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite value in forward pass at op `{0}`")]
    NonFiniteForward(&'static str),
    #[error("non-finite value in backward pass at op `{0}`")]
    NonFiniteBackward(&'static str),
    #[error("node {0} is not a trainable leaf")]
    NotTrainable(usize),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatVec { w: NodeId, x: NodeId },
    Tanh(NodeId),
    Sum(NodeId),
    Dot(NodeId, NodeId),
    Mse(NodeId, NodeId),
    Concat(Vec<NodeId>),
    /// Mean of the given rows of a [v, d] table; duplicates accumulate.
    RowsMean { table: NodeId, rows: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatVec { .. } => "matvec",
            Op::Tanh(..) => "tanh",
            Op::Sum(..) => "sum",
            Op::Dot(..) => "dot",
            Op::Mse(..) => "mse",
            Op::Concat(..) => "concat",
            Op::RowsMean { .. } => "rows_mean",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    trainable: bool,
}

/// Ordered record of primitive ops with their input and output values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// First op whose output contained a NaN/Inf, if any.
    poisoned: Option<&'static str>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// First op that produced a non-finite value, if any.
    pub fn poisoned(&self) -> Option<&'static str> {
        self.poisoned
    }

    /// Record a constant input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Record a trainable input; `grad` may be asked for it.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, trainable: bool) -> NodeId {
        if self.poisoned.is_none() && !value.all_finite() {
            self.poisoned = Some(op.name());
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value, trainable });
        id
    }

    fn values(&self, a: NodeId, b: NodeId) -> (&Tensor, &Tensor) {
        (&self.nodes[a.0].value, &self.nodes[b.0].value)
    }

    // ── primitive ops ────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = self.values(a, b);
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let mut out = Tensor::zeros(ta.shape().to_vec());
        tensor::add_into(out.data_mut(), ta.data(), tb.data());
        self.push(Op::Add(a, b), out, false)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = self.values(a, b);
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let mut out = Tensor::zeros(ta.shape().to_vec());
        tensor::sub_into(out.data_mut(), ta.data(), tb.data());
        self.push(Op::Sub(a, b), out, false)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = self.values(a, b);
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let mut out = Tensor::zeros(ta.shape().to_vec());
        tensor::mul_into(out.data_mut(), ta.data(), tb.data());
        self.push(Op::Mul(a, b), out, false)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let ta = self.value(a);
        let mut out = Tensor::zeros(ta.shape().to_vec());
        tensor::scale_into(out.data_mut(), ta.data(), c);
        self.push(Op::Scale(a, c), out, false)
    }

    /// w: [m, n] times x: [n] -> [m].
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> NodeId {
        let (tw, tx) = self.values(w, x);
        assert_eq!(tw.shape().len(), 2, "matvec: weight must be a matrix");
        let (m, n) = (tw.shape()[0], tw.shape()[1]);
        assert_eq!(tx.shape(), [n], "matvec: vector length {} != cols {n}", tx.numel());
        let mut out = Tensor::zeros(vec![m]);
        tensor::matvec_into(out.data_mut(), tw.data(), tx.data(), m, n);
        self.push(Op::MatVec { w, x }, out, false)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let mut out = Tensor::zeros(ta.shape().to_vec());
        tensor::tanh_into(out.data_mut(), ta.data());
        self.push(Op::Tanh(a), out, false)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(total), false)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = self.values(a, b);
        assert_eq!(ta.shape(), tb.shape(), "dot shape mismatch");
        let v = tensor::dot(ta.data(), tb.data());
        self.push(Op::Dot(a, b), Tensor::scalar(v), false)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = self.values(a, b);
        assert_eq!(ta.shape(), tb.shape(), "mse shape mismatch");
        let v = tensor::mse(ta.data(), tb.data());
        self.push(Op::Mse(a, b), Tensor::scalar(v), false)
    }

    /// Concatenate 1-D tensors.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of zero parts");
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.shape().len(), 1, "concat: parts must be 1-D");
            data.extend_from_slice(t.data());
        }
        self.push(Op::Concat(parts.to_vec()), Tensor::vector(data), false)
    }

    /// Mean of the selected rows of a [v, d] table.
    pub fn rows_mean(&mut self, table: NodeId, rows: &[usize]) -> NodeId {
        let t = self.value(table);
        assert_eq!(t.shape().len(), 2, "rows_mean: table must be 2-D");
        assert!(!rows.is_empty(), "rows_mean of zero rows");
        let (v, d) = (t.shape()[0], t.shape()[1]);
        for &r in rows {
            assert!(r < v, "rows_mean: row {r} out of {v}");
        }
        let mut out = vec![0.0; d];
        for &r in rows {
            tensor::add_into_self(&mut out, &t.data()[r * d..(r + 1) * d]);
        }
        let inv = 1.0 / rows.len() as f64;
        for o in &mut out {
            *o *= inv;
        }
        self.push(Op::RowsMean { table, rows: rows.to_vec() }, Tensor::vector(out), false)
    }

    // ── reverse sweep ────────────────────────────────────────────

    /// Exact reverse-mode gradients of a scalar `root` for each requested
    /// trainable leaf. A leaf with no path to the root gets a zero gradient.
    /// Deterministic for a fixed tape.
    pub fn grad(&self, root: NodeId, leaves: &[NodeId]) -> Result<Vec<Tensor>, GradError> {
        let root_val = self.value(root);
        if !root_val.is_scalar() {
            return Err(GradError::NonScalarRoot(root_val.shape().to_vec()));
        }
        if let Some(op) = self.poisoned {
            return Err(GradError::NonFiniteForward(op));
        }
        for &l in leaves {
            if !self.nodes[l.0].trainable {
                return Err(GradError::NotTrainable(l.0));
            }
        }

        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = adj[i].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(GradError::NonFiniteBackward(self.nodes[i].op.name()));
            }
            self.backward_op(i, &g, &mut adj);
            adj[i] = Some(g);
        }

        Ok(leaves
            .iter()
            .map(|&l| {
                let shape = self.nodes[l.0].value.shape().to_vec();
                match &adj[l.0] {
                    Some(g) => Tensor::new(shape, g.clone()),
                    None => Tensor::zeros(shape),
                }
            })
            .collect())
    }

    fn adj_buf<'a>(
        adj: &'a mut [Option<Vec<f64>>],
        id: NodeId,
        len: usize,
    ) -> &'a mut [f64] {
        adj[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn backward_op(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let buf = Self::adj_buf(adj, *a, g.len());
                tensor::add_into_self(buf, g);
                let buf = Self::adj_buf(adj, *b, g.len());
                tensor::add_into_self(buf, g);
            }
            Op::Sub(a, b) => {
                let buf = Self::adj_buf(adj, *a, g.len());
                tensor::add_into_self(buf, g);
                let buf = Self::adj_buf(adj, *b, g.len());
                tensor::axpy(buf, -1.0, g);
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let buf = Self::adj_buf(adj, *a, g.len());
                for ((o, gi), bi) in buf.iter_mut().zip(g).zip(vb) {
                    *o += gi * bi;
                }
                let buf = Self::adj_buf(adj, *b, g.len());
                for ((o, gi), ai) in buf.iter_mut().zip(g).zip(va) {
                    *o += gi * ai;
                }
            }
            Op::Scale(a, c) => {
                let buf = Self::adj_buf(adj, *a, g.len());
                tensor::axpy(buf, *c, g);
            }
            Op::MatVec { w, x } => {
                let tw = self.value(*w);
                let (m, n) = (tw.shape()[0], tw.shape()[1]);
                let wv = tw.data();
                let xv = self.value(*x).data();
                // dW[r, c] += g[r] * x[c]
                let wbuf = Self::adj_buf(adj, *w, m * n);
                for r in 0..m {
                    tensor::axpy(&mut wbuf[r * n..(r + 1) * n], g[r], xv);
                }
                // dx[c] += sum_r g[r] * W[r, c]
                let xbuf = Self::adj_buf(adj, *x, n);
                for r in 0..m {
                    tensor::axpy(xbuf, g[r], &wv[r * n..(r + 1) * n]);
                }
            }
            Op::Tanh(a) => {
                let y = self.value(NodeId(i)).data();
                let buf = Self::adj_buf(adj, *a, g.len());
                for ((o, gi), yi) in buf.iter_mut().zip(g).zip(y) {
                    *o += gi * (1.0 - yi * yi);
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                let buf = Self::adj_buf(adj, *a, n);
                for o in buf.iter_mut() {
                    *o += g[0];
                }
            }
            Op::Dot(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let buf = Self::adj_buf(adj, *a, vb.len());
                tensor::axpy(buf, g[0], vb);
                let buf = Self::adj_buf(adj, *b, va.len());
                tensor::axpy(buf, g[0], va);
            }
            Op::Mse(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let k = 2.0 * g[0] / va.len() as f64;
                let buf = Self::adj_buf(adj, *a, va.len());
                for ((o, ai), bi) in buf.iter_mut().zip(va).zip(vb) {
                    *o += k * (ai - bi);
                }
                let buf = Self::adj_buf(adj, *b, va.len());
                for ((o, ai), bi) in buf.iter_mut().zip(va).zip(vb) {
                    *o -= k * (ai - bi);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let buf = Self::adj_buf(adj, p, n);
                    tensor::add_into_self(buf, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::RowsMean { table, rows } => {
                let t = self.value(*table);
                let (v, d) = (t.shape()[0], t.shape()[1]);
                let inv = 1.0 / rows.len() as f64;
                let buf = Self::adj_buf(adj, *table, v * d);
                for &r in rows {
                    tensor::axpy(&mut buf[r * d..(r + 1) * d], inv, g);
                }
            }
        }
    }
}
