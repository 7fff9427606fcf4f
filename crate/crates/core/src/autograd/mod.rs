//! Reverse-mode automatic differentiation over dense real tensors.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding
//! its value and a backward rule. Nodes are appended in evaluation order, so
//! the node list is already topologically sorted and [`Tape::backward`] is a
//! single reverse sweep.
//!
//! Quaternion layers never appear here: they are lowered to real block
//! matrices before reaching the tape. Because the Hamilton product with a
//! fixed left operand is linear in the right operand's components, the
//! gradients of the lowered graph are exactly the quaternion gradients.
//!
//! ```
//! use qnn_core::autograd::Tape;
//! use qnn_core::params::ParamStore;
//! use qnn_core::tensor::Tensor;
//!
//! let mut store = ParamStore::<f64>::new();
//! let w = store.add("w", Tensor::from_f64(vec![2], &[3.0, -1.0]).unwrap());
//! let tape = Tape::new();
//! let loss = tape.param(&store, w).mul(tape.param(&store, w)).unwrap().sum();
//! tape.backward(loss, &mut store).unwrap();
//! assert_eq!(store.grad(w).unwrap(), &[6.0, -2.0]);
//! ```

pub mod kernels;

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{QnnError, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{split_axis, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, T),
    AddBias(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    HardTanh(NodeId),
    Relu(NodeId),
    Reshape(NodeId),
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        src: NodeId,
        axis: usize,
        start: usize,
    },
    ReverseTime {
        src: NodeId,
        lengths: Vec<usize>,
    },
    QuatNormalize {
        src: NodeId,
        eps: T,
    },
    SumAll(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        valid: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Record of one forward pass.
///
/// A tape is confined to the thread that built it. Parameter values enter
/// through [`Tape::param`] as shared buffers, so the store they came from
/// stays free to be mutated (copy-on-write) once the tape is dropped.
#[derive(Debug)]
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    param_nodes: RefCell<HashMap<ParamId, NodeId>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: NodeId,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing on it requires gradients.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool, param: Option<ParamId>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
            param,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: NodeId) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    fn grad_flag(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false, None)
    }

    /// A leaf that is not a stored parameter (for example an input whose
    /// gradient is wanted in a check).
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad, None)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true, Some(id));
        self.param_nodes.borrow_mut().insert(id, v.id);
        v
    }

    fn unary(&self, a: Var<'_, T>, f: impl Fn(T) -> T, op: Op<T>) -> Var<'_, T> {
        let av = self.value_of(a.id);
        let data = av.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("same length");
        self.push(out, op, self.grad_flag(a.id), None)
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var<'_, T>,
        b: Var<'_, T>,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'_, T>> {
        let av = self.value_of(a.id);
        let bv = self.value_of(b.id);
        let data: Vec<T> = if av.shape() == bv.shape() {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        } else if bv.shape().is_empty() {
            let y = bv.data()[0];
            av.data().iter().map(|&x| f(x, y)).collect()
        } else if av.shape().is_empty() {
            let x = av.data()[0];
            bv.data().iter().map(|&y| f(x, y)).collect()
        } else {
            return Err(QnnError::dim(name, av.shape(), bv.shape()));
        };
        let shape = if av.shape().is_empty() {
            bv.shape().to_vec()
        } else {
            av.shape().to_vec()
        };
        let rg = self.grad_flag(a.id) || self.grad_flag(b.id);
        Ok(self.push(Tensor::new(shape, data)?, op, rg, None))
    }

    /// Runs the backward sweep from a scalar `loss` and returns the gradient
    /// of every leaf that requires one.
    pub fn gradients(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(QnnError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(QnnError::Contract(
                "loss is not connected to any leaf that requires a gradient".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![T::one()]);
        let mut leaves = Vec::new();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut sink = GradSink {
                nodes: &nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf => {
                    leaves.push((id, node.param, g));
                    continue;
                }
                &Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a].value, &nodes[b].value);
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    sink.with(a, |da| kernels::matmul_grad_lhs(da, &g, bv.data(), m, k, n));
                    sink.with(b, |db| kernels::matmul_grad_rhs(db, &g, av.data(), m, k, n));
                }
                &Op::Transpose(a) => {
                    let s = nodes[id].value.shape();
                    let gt = kernels::transpose(&g, s[0], s[1]);
                    sink.add(a, &gt);
                }
                &Op::Add(a, b) => {
                    sink.add_broadcast(a, &g);
                    sink.add_broadcast(b, &g);
                }
                &Op::Sub(a, b) => {
                    sink.add_broadcast(a, &g);
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    sink.add_broadcast(b, &neg);
                }
                &Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a].value, &nodes[b].value);
                    let ga = scaled_by(&g, bv);
                    let gb = scaled_by(&g, av);
                    sink.add_broadcast(a, &ga);
                    sink.add_broadcast(b, &gb);
                }
                &Op::Neg(a) => {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    sink.add(a, &neg);
                }
                &Op::Scale(a, s) => {
                    let gs: Vec<T> = g.iter().map(|&v| v * s).collect();
                    sink.add(a, &gs);
                }
                &Op::AddBias(x, b) => {
                    sink.add(x, &g);
                    let n = nodes[b].value.len();
                    sink.with(b, |db| {
                        for row in g.chunks(n) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d = *d + v;
                            }
                        }
                    });
                }
                &Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let ga: Vec<T> = g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect();
                    sink.add(a, &ga);
                }
                &Op::Tanh(a) => {
                    let y = node.value.data();
                    let ga: Vec<T> = g.iter().zip(y).map(|(&gv, &yv)| gv * (T::one() - yv * yv)).collect();
                    sink.add(a, &ga);
                }
                &Op::HardTanh(a) => {
                    let x = nodes[a].value.data();
                    let ga: Vec<T> = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > -T::one() && xv < T::one() { gv } else { T::zero() })
                        .collect();
                    sink.add(a, &ga);
                }
                &Op::Relu(a) => {
                    let x = nodes[a].value.data();
                    let ga: Vec<T> = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    sink.add(a, &ga);
                }
                &Op::Reshape(a) => sink.add(a, &g),
                Op::Concat { parts, axis } => {
                    let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                    let total = node.value.shape()[*axis] * inner;
                    let mut offset = 0;
                    for &p in parts {
                        let ext = nodes[p].value.shape()[*axis] * inner;
                        sink.with(p, |dp| {
                            for o in 0..outer {
                                let src = &g[o * total + offset..o * total + offset + ext];
                                for (d, &v) in dp[o * ext..(o + 1) * ext].iter_mut().zip(src) {
                                    *d = *d + v;
                                }
                            }
                        });
                        offset += ext;
                    }
                }
                &Op::Slice { src, axis, start } => {
                    let (outer, src_ext, inner) = split_axis(nodes[src].value.shape(), axis);
                    let len = node.value.shape()[axis];
                    sink.with(src, |ds| {
                        for o in 0..outer {
                            let base = o * src_ext * inner + start * inner;
                            let gsrc = &g[o * len * inner..(o + 1) * len * inner];
                            for (d, &v) in ds[base..base + len * inner].iter_mut().zip(gsrc) {
                                *d = *d + v;
                            }
                        }
                    });
                }
                Op::ReverseTime { src, lengths } => {
                    let s = node.value.shape();
                    let permuted = reverse_time_data(&g, s[0], s[1], s[2], lengths);
                    sink.add(*src, &permuted);
                }
                &Op::QuatNormalize { src, eps } => {
                    let x = nodes[src].value.data();
                    let width = *node.value.shape().last().unwrap_or(&0);
                    let h = width / 4;
                    sink.with(src, |dx| {
                        for (row, (xr, gr)) in x.chunks(width).zip(g.chunks(width)).enumerate() {
                            for q in 0..h {
                                let idx = [q, h + q, 2 * h + q, 3 * h + q];
                                let n = idx.iter().map(|&i| xr[i] * xr[i]).sum::<T>().sqrt();
                                let d = n + eps;
                                let dot: T = idx.iter().map(|&i| xr[i] * gr[i]).sum();
                                for &i in &idx {
                                    let mut v = gr[i] / d;
                                    if n > T::zero() {
                                        v = v - xr[i] * dot / (n * d * d);
                                    }
                                    let at = row * width + i;
                                    dx[at] = dx[at] + v;
                                }
                            }
                        }
                    });
                }
                &Op::SumAll(a) => {
                    let g0 = g[0];
                    sink.with(a, |da| {
                        for d in da.iter_mut() {
                            *d = *d + g0;
                        }
                    });
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    valid,
                    probs,
                    count,
                } => {
                    if *count > 0 {
                        let c = *nodes[*logits].value.shape().last().unwrap_or(&1);
                        let scale = g[0] / T::lit(*count as f64);
                        sink.with(*logits, |dl| {
                            for (row, (&t, &ok)) in targets.iter().zip(valid).enumerate() {
                                if !ok {
                                    continue;
                                }
                                for j in 0..c {
                                    let mut v = probs[row * c + j];
                                    if j == t {
                                        v = v - T::one();
                                    }
                                    dl[row * c + j] = dl[row * c + j] + v * scale;
                                }
                            }
                        });
                    }
                }
            }
        }
        Ok(Gradients { leaves })
    }

    /// Backward sweep that accumulates parameter gradients into `store`.
    /// Repeated calls add up; call [`ParamStore::zero_grad`] to reset.
    pub fn backward(&self, loss: Var<'_, T>, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.gradients(loss)?;
        grads.accumulate_into(store);
        Ok(grads)
    }
}

fn scaled_by<T: Scalar>(g: &[T], other: &Tensor<T>) -> Vec<T> {
    if other.len() == g.len() {
        g.iter().zip(other.data()).map(|(&a, &b)| a * b).collect()
    } else {
        let s = other.data()[0];
        g.iter().map(|&a| a * s).collect()
    }
}

fn reverse_time_data<T: Scalar>(data: &[T], t: usize, b: usize, d: usize, lengths: &[usize]) -> Vec<T> {
    let mut out = data.to_vec();
    for (bi, &len) in lengths.iter().enumerate() {
        for ti in 0..len {
            let src = ((len - 1 - ti) * b + bi) * d;
            let dst = (ti * b + bi) * d;
            out[dst..dst + d].copy_from_slice(&data[src..src + d]);
        }
    }
    debug_assert_eq!(data.len(), t * b * d);
    out
}

struct GradSink<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Scalar> GradSink<'_, T> {
    fn with(&mut self, id: NodeId, f: impl FnOnce(&mut [T])) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let n = self.nodes[id].value.len();
        let buf = self.grads[id].get_or_insert_with(|| vec![T::zero(); n]);
        f(buf);
    }

    fn add(&mut self, id: NodeId, g: &[T]) {
        self.with(id, |buf| {
            for (b, &v) in buf.iter_mut().zip(g) {
                *b = *b + v;
            }
        });
    }

    /// Like `add`, but reduces to a single value when `id` is a scalar that
    /// was broadcast in the forward pass.
    fn add_broadcast(&mut self, id: NodeId, g: &[T]) {
        if self.nodes[id].value.len() == 1 && g.len() != 1 {
            let s: T = g.iter().copied().sum();
            self.add(id, &[s]);
        } else {
            self.add(id, g);
        }
    }
}

/// Leaf gradients produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    leaves: Vec<(NodeId, Option<ParamId>, Vec<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&[T]> {
        self.leaves.iter().find(|(id, _, _)| *id == var.id).map(|(_, _, g)| g.as_slice())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.leaves
            .iter()
            .find(|(_, p, _)| *p == Some(id))
            .map(|(_, _, g)| g.as_slice())
    }

    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (_, param, g) in &self.leaves {
            if let Some(p) = param {
                store.accumulate_grad(*p, g);
            }
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.grad_flag(self.id)
    }

    fn same_tape(&self, other: &Var<'_, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables from different tapes"
        );
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(QnnError::dim("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let out = Tensor::new(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id), rg, None))
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let a = self.value();
        if a.shape().len() != 2 {
            return Err(QnnError::dim("transpose", a.shape(), &[]));
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let out = Tensor::new(vec![c, r], kernels::transpose(a.data(), r, c))?;
        Ok(self.tape.push(out, Op::Transpose(self.id), self.requires_grad(), None))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        self.tape.binary("add", self, other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        self.tape.binary("sub", self, other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        self.tape.binary("mul", self, other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn neg(self) -> Var<'t, T> {
        self.tape.unary(self, |v| -v, Op::Neg(self.id))
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        self.tape.unary(self, |v| v * s, Op::Scale(self.id, s))
    }

    /// Adds a bias vector to every row: `[..., n] + [n]`.
    pub fn add_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&bias);
        let (x, b) = (self.value(), bias.value());
        let n = b.len();
        if b.shape().len() != 1 || x.shape().last() != Some(&n) {
            return Err(QnnError::dim("add_bias", x.shape(), b.shape()));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v = *v + bv;
            }
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(out, Op::AddBias(self.id, bias.id), rg, None))
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.tape.unary(self, kernels::sigmoid, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.tape.unary(self, |v| v.tanh(), Op::Tanh(self.id))
    }

    pub fn hardtanh(self) -> Var<'t, T> {
        self.tape.unary(self, kernels::hardtanh, Op::HardTanh(self.id))
    }

    pub fn relu(self) -> Var<'t, T> {
        self.tape.unary(self, kernels::relu, Op::Relu(self.id))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let out = self.value().reshaped(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id), self.requires_grad(), None))
    }

    pub fn sum(self) -> Var<'t, T> {
        let s: T = self.value().data().iter().copied().sum();
        self.tape
            .push(Tensor::scalar(s), Op::SumAll(self.id), self.requires_grad(), None)
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        if axis >= a.shape().len() {
            return Err(QnnError::Index {
                op: "slice",
                index: axis,
                extent: a.shape().len(),
            });
        }
        let (outer, ext, inner) = split_axis(a.shape(), axis);
        if len == 0 || start + len > ext {
            return Err(QnnError::Index {
                op: "slice",
                index: start + len,
                extent: ext,
            });
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            data.extend_from_slice(&a.data()[base..base + len * inner]);
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        Ok(self.tape.push(
            out,
            Op::Slice {
                src: self.id,
                axis,
                start,
            },
            self.requires_grad(),
            None,
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| QnnError::Contract("concat of zero tensors".into()))?;
        let tape = first.tape;
        let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let s0 = values[0].shape();
        if axis >= s0.len() {
            return Err(QnnError::Index {
                op: "concat",
                index: axis,
                extent: s0.len(),
            });
        }
        for v in &values[1..] {
            let s = v.shape();
            let compatible = s.len() == s0.len()
                && s.iter().zip(s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(QnnError::dim("concat", s0, s));
            }
        }
        let (outer, _, inner) = split_axis(s0, axis);
        let total_ext: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_ext * inner);
        for o in 0..outer {
            for v in &values {
                let ext = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * ext..(o + 1) * ext]);
            }
        }
        let mut shape = s0.to_vec();
        shape[axis] = total_ext;
        let rg = parts.iter().any(|p| p.requires_grad());
        let out = Tensor::new(shape, data)?;
        Ok(tape.push(
            out,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
            None,
        ))
    }

    /// Reverses a time-major `[T, B, D]` sequence. With `lengths`, only the
    /// first `lengths[b]` frames of each sequence are reversed and padding
    /// stays in place.
    pub fn reverse_time(self, lengths: Option<&[usize]>) -> Result<Var<'t, T>> {
        let a = self.value();
        if a.shape().len() != 3 {
            return Err(QnnError::dim("reverse_time", a.shape(), &[0, 0, 0]));
        }
        let (t, b, d) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let lengths: Vec<usize> = match lengths {
            Some(l) => {
                if l.len() != b {
                    return Err(QnnError::dim("reverse_time", a.shape(), &[l.len()]));
                }
                if let Some(&bad) = l.iter().find(|&&len| len > t) {
                    return Err(QnnError::Index {
                        op: "reverse_time",
                        index: bad,
                        extent: t,
                    });
                }
                l.to_vec()
            }
            None => vec![t; b],
        };
        let data = reverse_time_data(a.data(), t, b, d, &lengths);
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(
            out,
            Op::ReverseTime {
                src: self.id,
                lengths,
            },
            self.requires_grad(),
            None,
        ))
    }

    /// Per-quaternion `q / (|q| + eps)` over a trailing quarter-block axis.
    pub fn quat_normalize(self, eps: T) -> Result<Var<'t, T>> {
        let a = self.value();
        let width = *a.shape().last().unwrap_or(&0);
        if width == 0 || width % 4 != 0 {
            return Err(QnnError::dim("quat_normalize", a.shape(), &[4]));
        }
        let h = width / 4;
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(width) {
            for q in 0..h {
                let idx = [q, h + q, 2 * h + q, 3 * h + q];
                let n = idx.iter().map(|&i| row[i] * row[i]).sum::<T>().sqrt();
                let inv = T::one() / (n + eps);
                for &i in &idx {
                    row[i] = row[i] * inv;
                }
            }
        }
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(
            out,
            Op::QuatNormalize { src: self.id, eps },
            self.requires_grad(),
            None,
        ))
    }

    /// Mean negative log-softmax over rows flagged in `valid`.
    ///
    /// `self` is `[..., C]`, flattened to rows; `targets` and `valid` have one
    /// entry per row. Returns 0 when no row is valid.
    pub fn cross_entropy(self, targets: &[usize], valid: &[bool]) -> Result<Var<'t, T>> {
        let a = self.value();
        let c = *a.shape().last().unwrap_or(&0);
        if c == 0 {
            return Err(QnnError::dim("cross_entropy", a.shape(), &[1]));
        }
        let rows = a.len() / c;
        if targets.len() != rows || valid.len() != rows {
            return Err(QnnError::dim("cross_entropy", a.shape(), &[targets.len(), valid.len()]));
        }
        let mut probs = vec![T::zero(); a.len()];
        let mut total = T::zero();
        let mut count = 0;
        for (row, (&t, &ok)) in targets.iter().zip(valid).enumerate() {
            let logits = &a.data()[row * c..(row + 1) * c];
            let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &l) in probs[row * c..(row + 1) * c].iter_mut().zip(logits) {
                *p = (l - max).exp();
                z = z + *p;
            }
            for p in &mut probs[row * c..(row + 1) * c] {
                *p = *p / z;
            }
            if ok {
                if t >= c {
                    return Err(QnnError::Index {
                        op: "cross_entropy",
                        index: t,
                        extent: c,
                    });
                }
                total = total + (max + z.ln() - logits[t]);
                count += 1;
            }
        }
        let loss = if count > 0 {
            total / T::lit(count as f64)
        } else {
            T::zero()
        };
        Ok(self.tape.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                valid: valid.to_vec(),
                probs,
                count,
            },
            self.requires_grad(),
            None,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let eye = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let b = tape.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        assert_eq!(eye.matmul(b).unwrap().value().data(), b.value().data());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![4, 2]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn grad_of_summed_product_is_column_sums() {
        let mut store = ParamStore::new();
        let a = store.add("a", t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let tape = Tape::new();
        let b = tape.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let loss = tape.param(&store, a).matmul(b).unwrap().sum();
        tape.backward(loss, &mut store).unwrap();
        // d/dA sum(A·B) = 1·Bᵀ: every row is the row-sums of B.
        assert_eq!(store.grad(a).unwrap(), &[3., 7., 11., 3., 7., 11.]);
    }

    #[test]
    fn sum_grad_is_ones_and_accumulates() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[2, 2], &[0.5, -1.0, 2.0, 3.0]));
        let tape = Tape::new();
        let loss = tape.param(&store, w).sum();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w).unwrap(), &[1.0; 4]);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w).unwrap(), &[2.0; 4]);
        store.zero_grad();
        assert!(store.grad(w).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[2], &[1.0, 2.0]));
        let tape = Tape::new();
        let v = tape.param(&store, w).tanh();
        assert!(matches!(tape.backward(v, &mut store), Err(QnnError::Contract(_))));
    }

    #[test]
    fn reverse_time_is_involution() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let s = tape.constant(t(&[4, 2, 3], &data));
        let back = s.reverse_time(None).unwrap().reverse_time(None).unwrap();
        assert_eq!(back.value().data(), &data[..]);
        let lens = [2, 4];
        let r = s.reverse_time(Some(&lens)).unwrap();
        // batch 0 keeps frames 2,3 in place
        assert_eq!(&r.value().data()[12..15], &data[12..15]);
        assert_eq!(&r.value().data()[0..3], &data[6..9]);
        let rr = r.reverse_time(Some(&lens)).unwrap();
        assert_eq!(rr.value().data(), &data[..]);
    }

    #[test]
    fn slice_concat_roundtrip() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..16).map(f64::from).collect();
        let x = tape.constant(t(&[2, 8], &data));
        let quarters: Vec<_> = (0..4).map(|q| x.slice(1, 2 * q, 2).unwrap()).collect();
        let y = Var::concat(&quarters, 1).unwrap();
        assert_eq!(y.value().data(), &data[..]);
        assert!(x.slice(1, 7, 2).is_err());
    }

    #[test]
    fn scalar_broadcast() {
        let mut store = ParamStore::new();
        let s = store.add("s", Tensor::scalar(2.0));
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = x.mul(tape.param(&store, s)).unwrap();
        assert_eq!(y.value().data(), &[2.0, 4.0, 6.0]);
        tape.backward(y.sum(), &mut store).unwrap();
        assert_eq!(store.grad(s).unwrap(), &[6.0]);
        let bad = tape.constant(t(&[2], &[1.0, 1.0]));
        assert!(x.add(bad).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(vec![3, 4]), true);
        let loss = logits.cross_entropy(&[0, 1, 3], &[true, true, true]).unwrap();
        assert!((loss.value().data()[0] - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn no_grad_tape_refuses_backward() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[1], &[1.0]));
        let tape = Tape::no_grad();
        let loss = tape.param(&store, w).sum();
        assert!(tape.backward(loss, &mut store).is_err());
    }
}
