//! Operation recording and reverse-mode gradient propagation.
//!
//! A `Graph` is an append-only tape. Each op that touches at least one
//! attached tensor appends a node holding the op inputs and the computed
//! value; ops on fully detached tensors compute without recording. Backward
//! walks the tape in reverse, which is already a topological order because
//! parents always precede children.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::conv;
use super::kernels::{
    axis_split, logsumexp, matmul2d, matmul_nt, matmul_tn, softmax, transpose2d, zip_broadcast,
};
use super::{broadcast_shape_of, Element, Result, Tensor, TensorError};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Position of a recorded node inside a specific graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeRef {
    pub(crate) graph: u64,
    pub(crate) idx: usize,
}

/// Op input: either an earlier node or a detached value captured as-is.
enum Parent<E: Element> {
    Node(usize),
    Free(Tensor<E>),
}

impl<E: Element> Parent<E> {
    fn idx(&self) -> Option<usize> {
        match self {
            Parent::Node(i) => Some(*i),
            Parent::Free(_) => None,
        }
    }
}

enum Op<E: Element> {
    Leaf,
    Add(Parent<E>, Parent<E>),
    Sub(Parent<E>, Parent<E>),
    Mul(Parent<E>, Parent<E>),
    Scale(Parent<E>, E),
    Tanh(Parent<E>),
    Sigmoid(Parent<E>),
    Relu(Parent<E>),
    Abs(Parent<E>),
    Matmul {
        a: Parent<E>,
        b: Parent<E>,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose(Parent<E>),
    Reshape(Parent<E>),
    Concat {
        parts: Vec<Parent<E>>,
        axis: usize,
    },
    Row {
        a: Parent<E>,
        index: usize,
    },
    Sum {
        a: Parent<E>,
        axis: Option<usize>,
    },
    Mean {
        a: Parent<E>,
        axis: Option<usize>,
    },
    Softmax {
        a: Parent<E>,
        axis: usize,
    },
    Conv2d {
        input: Parent<E>,
        kernel: Parent<E>,
        stride: usize,
        pad: usize,
    },
    CrossEntropy {
        logits: Parent<E>,
        target: usize,
    },
    SoftBootstrap {
        logits: Parent<E>,
        target: usize,
        beta: E,
    },
}

struct Node<E: Element> {
    value: Tensor<E>,
    op: Op<E>,
    watched: bool,
}

/// Gradients of a scalar loss with respect to every watched leaf.
#[derive(Debug)]
pub struct GradMap<E: Element> {
    graph: u64,
    grads: HashMap<usize, Tensor<E>>,
}

impl<E: Element> GradMap<E> {
    /// Gradient for a watched tensor of this graph, `None` otherwise.
    pub fn get(&self, t: &Tensor<E>) -> Option<&Tensor<E>> {
        let node = t.node()?;
        if node.graph != self.graph {
            return None;
        }
        self.grads.get(&node.idx)
    }
}

pub struct Graph<E: Element> {
    id: u64,
    nodes: Vec<Node<E>>,
    check_finite: bool,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Graph::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Graph<E> {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// Enables a sweep for NaN/Inf after every op. Costs a pass over each
    /// result, so it is off unless a caller is debugging instability.
    pub fn check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a differentiable leaf. Its gradient appears in
    /// every `GradMap` produced by this graph, as zeros when unused.
    pub fn watch(&mut self, t: &Tensor<E>) -> Tensor<E> {
        let idx = self.nodes.len();
        let value = t.detach();
        self.nodes.push(Node {
            value: value.clone(),
            op: Op::Leaf,
            watched: true,
        });
        value.with_node(NodeRef {
            graph: self.id,
            idx,
        })
    }

    fn verify_membership(&self, op: &'static str, inputs: &[&Tensor<E>]) -> Result<bool> {
        let mut any = false;
        for t in inputs {
            if let Some(n) = t.node() {
                if n.graph != self.id {
                    return Err(TensorError::CrossGraph { op });
                }
                any = true;
            }
        }
        Ok(any)
    }

    fn parent(&self, t: &Tensor<E>) -> Parent<E> {
        match t.node() {
            Some(n) => Parent::Node(n.idx),
            None => Parent::Free(t.detach()),
        }
    }

    fn pval<'a>(&'a self, p: &'a Parent<E>) -> &'a Tensor<E> {
        match p {
            Parent::Node(i) => &self.nodes[*i].value,
            Parent::Free(t) => t,
        }
    }

    fn push(
        &mut self,
        opname: &'static str,
        shape: &[usize],
        data: Vec<E>,
        op: Op<E>,
        attached: bool,
    ) -> Result<Tensor<E>> {
        let value = Tensor::from_vec(shape, data)?;
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite { op: opname });
        }
        if !attached {
            return Ok(value);
        }
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value: value.clone(),
            op,
            watched: false,
        });
        Ok(value.with_node(NodeRef {
            graph: self.id,
            idx,
        }))
    }

    // ---- elementwise binary ----

    fn binary(
        &mut self,
        opname: &'static str,
        a: &Tensor<E>,
        b: &Tensor<E>,
        f: impl Fn(E, E) -> E,
        make: impl FnOnce(Parent<E>, Parent<E>) -> Op<E>,
    ) -> Result<Tensor<E>> {
        let attached = self.verify_membership(opname, &[a, b])?;
        let out_shape = broadcast_shape_of(opname, a.shape(), b.shape())?;
        let numel: usize = out_shape.iter().product();
        let mut data = vec![E::zero(); numel];
        let (ad, bd) = (a.data(), b.data());
        zip_broadcast(&out_shape, a.shape(), b.shape(), |o, ia, ib| {
            data[o] = f(ad[ia], bd[ib]);
        });
        let op = make(self.parent(a), self.parent(b));
        self.push(opname, &out_shape, data, op, attached)
    }

    pub fn add(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    // ---- elementwise unary ----

    fn unary(
        &mut self,
        opname: &'static str,
        a: &Tensor<E>,
        f: impl Fn(E) -> E,
        make: impl FnOnce(Parent<E>) -> Op<E>,
    ) -> Result<Tensor<E>> {
        let attached = self.verify_membership(opname, &[a])?;
        let data: Vec<E> = a.data().iter().map(|&x| f(x)).collect();
        let op = make(self.parent(a));
        self.push(opname, a.shape(), data, op, attached)
    }

    pub fn scale(&mut self, a: &Tensor<E>, c: E) -> Result<Tensor<E>> {
        self.unary("scale", a, |x| x * c, |p| Op::Scale(p, c))
    }

    pub fn tanh(&mut self, a: &Tensor<E>) -> Result<Tensor<E>> {
        self.unary("tanh", a, |x| x.tanh(), Op::Tanh)
    }

    pub fn sigmoid(&mut self, a: &Tensor<E>) -> Result<Tensor<E>> {
        self.unary(
            "sigmoid",
            a,
            |x| E::one() / (E::one() + (-x).exp()),
            Op::Sigmoid,
        )
    }

    pub fn relu(&mut self, a: &Tensor<E>) -> Result<Tensor<E>> {
        self.unary(
            "relu",
            a,
            |x| if x > E::zero() { x } else { E::zero() },
            Op::Relu,
        )
    }

    pub fn abs(&mut self, a: &Tensor<E>) -> Result<Tensor<E>> {
        self.unary("abs", a, |x| x.abs(), Op::Abs)
    }

    // ---- linear algebra ----

    /// Matrix product. Accepts `[m,k]x[k,n] -> [m,n]`, matrix-vector
    /// `[m,k]x[k] -> [m]`, and vector-matrix `[k]x[k,n] -> [n]`.
    pub fn matmul(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        let attached = self.verify_membership("matmul", &[a, b])?;
        let (m, k, a_vec) = match a.shape() {
            [m, k] => (*m, *k, false),
            [k] => (1, *k, true),
            s => {
                return Err(TensorError::BadRank {
                    op: "matmul",
                    expected: "rank 1 or 2 lhs",
                    shape: s.to_vec(),
                })
            }
        };
        let (k2, n, b_vec) = match b.shape() {
            [k2, n] => (*k2, *n, false),
            [k2] => (*k2, 1, true),
            s => {
                return Err(TensorError::BadRank {
                    op: "matmul",
                    expected: "rank 1 or 2 rhs",
                    shape: s.to_vec(),
                })
            }
        };
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = matmul2d(a.data(), b.data(), m, k, n);
        let out_shape: Vec<usize> = match (a_vec, b_vec) {
            (false, false) => vec![m, n],
            (true, false) => vec![n],
            (false, true) => vec![m],
            (true, true) => vec![1],
        };
        let op = Op::Matmul {
            a: self.parent(a),
            b: self.parent(b),
            m,
            k,
            n,
        };
        self.push("matmul", &out_shape, data, op, attached)
    }

    pub fn transpose(&mut self, a: &Tensor<E>) -> Result<Tensor<E>> {
        let attached = self.verify_membership("transpose", &[a])?;
        let [r, c] = a.shape() else {
            return Err(TensorError::BadRank {
                op: "transpose",
                expected: "rank 2",
                shape: a.shape().to_vec(),
            });
        };
        let (r, c) = (*r, *c);
        let data = transpose2d(a.data(), r, c);
        let op = Op::Transpose(self.parent(a));
        self.push("transpose", &[c, r], data, op, attached)
    }

    pub fn reshape(&mut self, a: &Tensor<E>, shape: &[usize]) -> Result<Tensor<E>> {
        let attached = self.verify_membership("reshape", &[a])?;
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroExtent {
                shape: shape.to_vec(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != a.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: a.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = a.data().to_vec();
        let op = Op::Reshape(self.parent(a));
        self.push("reshape", shape, data, op, attached)
    }

    /// Concatenates tensors of equal rank along `axis`; all other extents
    /// must agree.
    pub fn concat(&mut self, parts: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        assert!(!parts.is_empty(), "concat requires at least one part");
        let attached = self.verify_membership("concat", parts)?;
        let first = parts[0].shape();
        if axis >= first.len() {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                shape: first.to_vec(),
            });
        }
        let mut axis_total = 0;
        for p in parts {
            let s = p.shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.to_vec(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.to_vec();
        out_shape[axis] = axis_total;
        let (outer, total, inner) = axis_split(&out_shape, axis);
        let mut data = vec![E::zero(); outer * total * inner];
        let mut offset = 0;
        for p in parts {
            let len = p.shape()[axis];
            let pd = p.data();
            for o in 0..outer {
                let src = &pd[o * len * inner..(o + 1) * len * inner];
                let dst = &mut data[(o * total + offset) * inner..];
                dst[..len * inner].copy_from_slice(src);
            }
            offset += len;
        }
        let op = Op::Concat {
            parts: parts.iter().map(|p| self.parent(p)).collect(),
            axis,
        };
        self.push("concat", &out_shape, data, op, attached)
    }

    /// Extracts row `index` of a rank-2 tensor as a rank-1 tensor.
    pub fn row(&mut self, a: &Tensor<E>, index: usize) -> Result<Tensor<E>> {
        let attached = self.verify_membership("row", &[a])?;
        let [rows, cols] = a.shape() else {
            return Err(TensorError::BadRank {
                op: "row",
                expected: "rank 2",
                shape: a.shape().to_vec(),
            });
        };
        let (rows, cols) = (*rows, *cols);
        if index >= rows {
            return Err(TensorError::RowIndex {
                op: "row",
                index,
                rows,
            });
        }
        let data = a.data()[index * cols..(index + 1) * cols].to_vec();
        let op = Op::Row {
            a: self.parent(a),
            index,
        };
        self.push("row", &[cols], data, op, attached)
    }

    // ---- reductions ----

    fn reduce(
        &mut self,
        opname: &'static str,
        a: &Tensor<E>,
        axis: Option<usize>,
        mean: bool,
    ) -> Result<Tensor<E>> {
        let attached = self.verify_membership(opname, &[a])?;
        let (out_shape, data) = match axis {
            None => {
                let mut sum = E::zero();
                for &v in a.data() {
                    sum = sum + v;
                }
                if mean {
                    sum = sum / E::from_f64(a.numel() as f64);
                }
                (vec![1], vec![sum])
            }
            Some(ax) => {
                if ax >= a.shape().len() {
                    return Err(TensorError::InvalidAxis {
                        op: opname,
                        axis: ax,
                        shape: a.shape().to_vec(),
                    });
                }
                let (outer, len, inner) = axis_split(a.shape(), ax);
                let mut out = vec![E::zero(); outer * inner];
                let ad = a.data();
                for o in 0..outer {
                    for s in 0..len {
                        for i in 0..inner {
                            out[o * inner + i] = out[o * inner + i] + ad[(o * len + s) * inner + i];
                        }
                    }
                }
                if mean {
                    let denom = E::from_f64(len as f64);
                    for v in &mut out {
                        *v = *v / denom;
                    }
                }
                let mut shape: Vec<usize> = a.shape().to_vec();
                shape.remove(ax);
                if shape.is_empty() {
                    shape.push(1);
                }
                (shape, out)
            }
        };
        let p = self.parent(a);
        let op = if mean {
            Op::Mean { a: p, axis }
        } else {
            Op::Sum { a: p, axis }
        };
        self.push(opname, &out_shape, data, op, attached)
    }

    pub fn sum_all(&mut self, a: &Tensor<E>) -> Result<Tensor<E>> {
        self.reduce("sum", a, None, false)
    }

    pub fn sum_axis(&mut self, a: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
        self.reduce("sum", a, Some(axis), false)
    }

    pub fn mean_all(&mut self, a: &Tensor<E>) -> Result<Tensor<E>> {
        self.reduce("mean", a, None, true)
    }

    pub fn mean_axis(&mut self, a: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
        self.reduce("mean", a, Some(axis), true)
    }

    /// Softmax along `axis`; the shifted-exponent form keeps large logits
    /// from overflowing.
    pub fn softmax(&mut self, a: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
        let attached = self.verify_membership("softmax", &[a])?;
        if axis >= a.shape().len() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                shape: a.shape().to_vec(),
            });
        }
        let data = softmax(a.data(), a.shape(), axis);
        let op = Op::Softmax {
            a: self.parent(a),
            axis,
        };
        self.push("softmax", &a.shape().to_vec(), data, op, attached)
    }

    // ---- structured ops ----

    /// 2D cross-correlation with square stride and zero padding. Input is
    /// `[C,H,W]` or `[N,C,H,W]`, kernel `[Cout,Cin,kh,kw]`.
    pub fn conv2d(
        &mut self,
        input: &Tensor<E>,
        kernel: &Tensor<E>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<E>> {
        let attached = self.verify_membership("conv2d", &[input, kernel])?;
        let (out_shape, data) = conv::forward(input, kernel, stride, pad)?;
        let op = Op::Conv2d {
            input: self.parent(input),
            kernel: self.parent(kernel),
            stride,
            pad,
        };
        self.push("conv2d", &out_shape, data, op, attached)
    }

    /// Cross-entropy of a one-hot target against rank-1 logits; returns a
    /// scalar. Computed as logsumexp(l) - l[target].
    pub fn cross_entropy_logits(&mut self, logits: &Tensor<E>, target: usize) -> Result<Tensor<E>> {
        let attached = self.verify_membership("cross_entropy", &[logits])?;
        let [classes] = logits.shape() else {
            return Err(TensorError::BadRank {
                op: "cross_entropy",
                expected: "rank 1 logits",
                shape: logits.shape().to_vec(),
            });
        };
        if target >= *classes {
            return Err(TensorError::ClassIndex {
                op: "cross_entropy",
                index: target,
                classes: *classes,
            });
        }
        let l = logits.data();
        let loss = logsumexp(l) - l[target];
        let op = Op::CrossEntropy {
            logits: self.parent(logits),
            target,
        };
        self.push("cross_entropy", &[1], vec![loss], op, attached)
    }

    /// Cross-entropy against a soft target that blends the one-hot label
    /// with the model's own prediction: q = beta*onehot + (1-beta)*p.
    /// Returns a scalar.
    pub fn soft_bootstrap_loss(
        &mut self,
        logits: &Tensor<E>,
        target: usize,
        beta: E,
    ) -> Result<Tensor<E>> {
        let attached = self.verify_membership("soft_bootstrap", &[logits])?;
        let [classes] = logits.shape() else {
            return Err(TensorError::BadRank {
                op: "soft_bootstrap",
                expected: "rank 1 logits",
                shape: logits.shape().to_vec(),
            });
        };
        if target >= *classes {
            return Err(TensorError::ClassIndex {
                op: "soft_bootstrap",
                index: target,
                classes: *classes,
            });
        }
        let l = logits.data();
        let lse = logsumexp(l);
        // log p_k = l_k - lse; p-weighted term uses probs directly.
        let mut loss = E::zero();
        let one = E::one();
        for (k, &lk) in l.iter().enumerate() {
            let logp = lk - lse;
            let p = logp.exp();
            let q = if k == target { beta } else { E::zero() };
            loss = loss - (q + (one - beta) * p) * logp;
        }
        let op = Op::SoftBootstrap {
            logits: self.parent(logits),
            target,
            beta,
        };
        self.push("soft_bootstrap", &[1], vec![loss], op, attached)
    }

    // ---- backward ----

    /// Gradients of a scalar `loss` with respect to every watched leaf.
    /// Watched leaves the loss never touched get exact zeros.
    pub fn backward(&self, loss: &Tensor<E>) -> Result<GradMap<E>> {
        let node = loss.node().ok_or(TensorError::DetachedBackward)?;
        if node.graph != self.id {
            return Err(TensorError::CrossGraph { op: "backward" });
        }
        if loss.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }

        let mut grads: Vec<Option<Vec<E>>> = Vec::with_capacity(node.idx + 1);
        grads.resize_with(node.idx + 1, || None);
        grads[node.idx] = Some(vec![E::one()]);

        let mut out = HashMap::new();
        for i in (0..=node.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].watched {
                let t = Tensor::from_vec(self.nodes[i].value.shape(), g.clone())
                    .expect("gradient matches node shape");
                out.insert(i, t);
            }
            self.accumulate_parents(i, &g, &mut grads);
        }

        // Watched leaves outside the loss ancestry still get zeros.
        for (i, n) in self.nodes.iter().enumerate().take(node.idx + 1) {
            if n.watched && !out.contains_key(&i) {
                out.insert(i, Tensor::zeros(n.value.shape()));
            }
        }
        Ok(GradMap {
            graph: self.id,
            grads: out,
        })
    }

    fn accumulate_parents(&self, i: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let mut sink = |p: &Parent<E>, contrib: Vec<E>| {
            if let Some(j) = p.idx() {
                match &mut grads[j] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a = *a + *c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (ash, bsh) = (self.pval(a).shape(), self.pval(b).shape());
                sink(a, reduce_to(g, out_shape, ash));
                sink(b, reduce_to(g, out_shape, bsh));
            }
            Op::Sub(a, b) => {
                let (ash, bsh) = (self.pval(a).shape(), self.pval(b).shape());
                sink(a, reduce_to(g, out_shape, ash));
                let neg: Vec<E> = g.iter().map(|&v| -v).collect();
                sink(b, reduce_to(&neg, out_shape, bsh));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.pval(a), self.pval(b));
                let mut da = vec![E::zero(); av.numel()];
                let mut db = vec![E::zero(); bv.numel()];
                let (ad, bd) = (av.data(), bv.data());
                zip_broadcast(out_shape, av.shape(), bv.shape(), |o, ia, ib| {
                    da[ia] = da[ia] + g[o] * bd[ib];
                    db[ib] = db[ib] + g[o] * ad[ia];
                });
                sink(a, da);
                sink(b, db);
            }
            Op::Scale(a, c) => sink(a, g.iter().map(|&v| v * *c).collect()),
            Op::Tanh(a) => {
                let y = node.value.data();
                sink(
                    a,
                    g.iter()
                        .zip(y)
                        .map(|(&gv, &yv)| gv * (E::one() - yv * yv))
                        .collect(),
                );
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                sink(
                    a,
                    g.iter()
                        .zip(y)
                        .map(|(&gv, &yv)| gv * yv * (E::one() - yv))
                        .collect(),
                );
            }
            Op::Relu(a) => {
                let x = self.pval(a).data();
                sink(
                    a,
                    g.iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > E::zero() { gv } else { E::zero() })
                        .collect(),
                );
            }
            Op::Abs(a) => {
                let x = self.pval(a).data();
                sink(
                    a,
                    g.iter()
                        .zip(x)
                        .map(|(&gv, &xv)| {
                            if xv > E::zero() {
                                gv
                            } else if xv < E::zero() {
                                -gv
                            } else {
                                E::zero()
                            }
                        })
                        .collect(),
                );
            }
            Op::Matmul { a, b, m, k, n } => {
                let (ad, bd) = (self.pval(a).data(), self.pval(b).data());
                sink(a, matmul_nt(g, bd, *m, *n, *k));
                sink(b, matmul_tn(ad, g, *m, *k, *n));
            }
            Op::Transpose(a) => {
                let [c, r] = out_shape else { unreachable!() };
                sink(a, transpose2d(g, *c, *r));
            }
            Op::Reshape(a) => sink(a, g.to_vec()),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.pval(p).shape()[*axis];
                    let mut dp = vec![E::zero(); outer * len * inner];
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..][..len * inner];
                        dp[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
                    }
                    sink(p, dp);
                    offset += len;
                }
            }
            Op::Row { a, index } => {
                let av = self.pval(a);
                let cols = av.shape()[1];
                let mut da = vec![E::zero(); av.numel()];
                da[index * cols..(index + 1) * cols].copy_from_slice(g);
                sink(a, da);
            }
            Op::Sum { a, axis } | Op::Mean { a, axis } => {
                let mean = matches!(node.op, Op::Mean { .. });
                let av = self.pval(a);
                let da = match axis {
                    None => {
                        let mut v = g[0];
                        if mean {
                            v = v / E::from_f64(av.numel() as f64);
                        }
                        vec![v; av.numel()]
                    }
                    Some(ax) => {
                        let (outer, len, inner) = axis_split(av.shape(), *ax);
                        let denom = if mean {
                            E::from_f64(len as f64)
                        } else {
                            E::one()
                        };
                        let mut da = vec![E::zero(); av.numel()];
                        for o in 0..outer {
                            for s in 0..len {
                                for idx in 0..inner {
                                    da[(o * len + s) * inner + idx] = g[o * inner + idx] / denom;
                                }
                            }
                        }
                        da
                    }
                };
                sink(a, da);
            }
            Op::Softmax { a, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(out_shape, *axis);
                let mut da = vec![E::zero(); y.len()];
                for o in 0..outer {
                    for idx in 0..inner {
                        let base = o * len * inner + idx;
                        let mut dot = E::zero();
                        for s in 0..len {
                            let f = base + s * inner;
                            dot = dot + g[f] * y[f];
                        }
                        for s in 0..len {
                            let f = base + s * inner;
                            da[f] = y[f] * (g[f] - dot);
                        }
                    }
                }
                sink(a, da);
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                let (iv, kv) = (self.pval(input), self.pval(kernel));
                let (di, dk) = conv::backward(g, iv, kv, *stride, *pad);
                sink(input, di);
                sink(kernel, dk);
            }
            Op::CrossEntropy { logits, target } => {
                let l = self.pval(logits).data();
                let p = softmax(l, &[l.len()], 0);
                let da: Vec<E> = p
                    .iter()
                    .enumerate()
                    .map(|(k, &pk)| {
                        let q = if k == *target { E::one() } else { E::zero() };
                        g[0] * (pk - q)
                    })
                    .collect();
                sink(logits, da);
            }
            Op::SoftBootstrap {
                logits,
                target,
                beta,
            } => {
                let l = self.pval(logits).data();
                let p = softmax(l, &[l.len()], 0);
                // H(p) = -sum p ln p; underflowed probabilities contribute 0.
                let mut entropy = E::zero();
                for &pk in &p {
                    if pk > E::zero() {
                        entropy = entropy - pk * pk.ln();
                    }
                }
                let one = E::one();
                let da: Vec<E> = p
                    .iter()
                    .enumerate()
                    .map(|(k, &pk)| {
                        let q = if k == *target { one } else { E::zero() };
                        let hard = *beta * (pk - q);
                        let soft = if pk > E::zero() {
                            -(one - *beta) * pk * (pk.ln() + entropy)
                        } else {
                            E::zero()
                        };
                        g[0] * (hard + soft)
                    })
                    .collect();
                sink(logits, da);
            }
        }
    }
}

/// Sums `g` (shaped `out_shape`) down to `src_shape`, undoing broadcast.
fn reduce_to<E: Element>(g: &[E], out_shape: &[usize], src_shape: &[usize]) -> Vec<E> {
    let numel: usize = src_shape.iter().product();
    let mut out = vec![E::zero(); numel];
    zip_broadcast(out_shape, src_shape, src_shape, |o, ia, _| {
        out[ia] = out[ia] + g[o];
    });
    out
}
