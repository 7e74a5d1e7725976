//! Dynamic reverse-mode tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Parameters are borrowed from
//! a [`ParamStore`] rather than copied, so building a tape over a large model
//! costs only the intermediate activations.

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::{split_axis, Tensor};
use crate::error::{Error, Result};

/// Clamp margin applied to `acos` inputs.
pub const ACOS_EPS: f64 = 1e-7;

/// Default epsilon for layer normalization.
pub const LN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Marker for a zero row in [`Tape::gather_rows`].
const ZERO_ROW: u32 = u32::MAX;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    Reshape(Var),
    Gather(Var, Arc<[u32]>),
    Sum(Var, usize),
    Mean(Var, usize),
    Max(Var, usize, Vec<u32>),
    Relu(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm(Var, usize, Vec<f64>),
    Acos(Var),
    Cos(Var),
    Sqrt(Var),
    Log(Var),
    Exp(Var),
    L2Normalize(Var, usize, Vec<f64>),
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Gradients from one [`Tape::backward`] call.
#[derive(Debug, Default)]
pub struct Grads {
    leaves: HashMap<Var, Vec<f64>>,
    params: ParamGrads,
    unreached: Vec<String>,
}

impl Grads {
    /// Gradient with respect to a leaf created with `requires_grad = true`.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v).map(Vec::as_slice)
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }

    /// Trainable parameters placed on the tape that the loss does not depend on.
    pub fn unreached_params(&self) -> &[String] {
        &self.unreached
    }
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, t: Tensor, node_op: Op, requires_grad: bool) -> Result<Var> {
        if !t.all_finite() {
            return Err(Error::NonFinite { op });
        }
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: node_op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input value; `requires_grad` leaves receive gradients.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Places a stored parameter on the tape. Repeated calls return the same handle.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: self.store.get(id).requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    // ---- linear algebra -------------------------------------------------

    /// `(m×k) · (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::from_raw(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[2]));
        }
        let (m, n) = (s[0], s[1]);
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push("transpose", Tensor::from_raw(vec![n, m], out), Op::Transpose(a), rg)
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcastable(sa, sb) {
            return Err(Error::shape(name, sa, sb));
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let bl = y.len();
        let out: Vec<f64> = x.iter().enumerate().map(|(i, &v)| f(v, y[i % bl])).collect();
        let shape = sa.to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(name, Tensor::from_raw(shape, out), op, rg)
    }

    /// `a + b`, where `b` either matches `a` or broadcasts over its leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("subtract", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("multiply", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::from_raw(t.shape().to_vec(), t.data().iter().map(|v| v * s).collect());
        let rg = self.rg(a);
        self.push("scale", out, Op::Scale(a, s), rg)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::from_raw(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        let rg = self.rg(a);
        self.push(name, out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |v| v.max(0.0), Op::Relu(a))
    }

    /// `acos` with the input clamped to `[-1 + ACOS_EPS, 1 - ACOS_EPS]`.
    pub fn acos(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "arccos",
            a,
            |v| v.clamp(-1.0 + ACOS_EPS, 1.0 - ACOS_EPS).acos(),
            Op::Acos(a),
        )
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary("cos", a, f64::cos, Op::Cos(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    // ---- structural -----------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat", Tensor::from_raw(shape, out), Op::Concat(parts.to_vec(), axis), rg)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape("narrow", &s, &[axis, start, len]));
        }
        let (outer, full, inner) = split_axis(&s, axis);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(a);
        self.push("narrow", Tensor::from_raw(shape, out), Op::Narrow(a, axis, start), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        self.push("reshape", t, Op::Reshape(a), rg)
    }

    /// Selects rows of `a` (viewed as `rows × last-dim`). `None` yields a zero row.
    pub fn gather_rows(&mut self, a: Var, index: &[Option<usize>]) -> Result<Var> {
        let t = self.value(a);
        let rows = t.rows();
        let mut packed = Vec::with_capacity(index.len());
        for i in index {
            match *i {
                Some(r) if r < rows => packed.push(r as u32),
                Some(r) => return Err(Error::shape("gather_rows", t.shape(), &[r])),
                None => packed.push(ZERO_ROW),
            }
        }
        self.gather_packed(a, packed.into())
    }

    /// Like [`Tape::gather_rows`] with every index present.
    pub fn select_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let rows = t.rows();
        if let Some(&bad) = index.iter().find(|&&r| r >= rows) {
            return Err(Error::shape("gather_rows", t.shape(), &[bad]));
        }
        self.gather_packed(a, index.iter().map(|&r| r as u32).collect())
    }

    fn gather_packed(&mut self, a: Var, index: Arc<[u32]>) -> Result<Var> {
        let t = self.value(a);
        let cols = t.cols();
        let x = t.data();
        let mut out = vec![0.0; index.len() * cols];
        for (r, &src) in index.iter().enumerate() {
            if src != ZERO_ROW {
                let s = src as usize * cols;
                out[r * cols..(r + 1) * cols].copy_from_slice(&x[s..s + cols]);
            }
        }
        let rg = self.rg(a);
        let shape = vec![index.len(), cols];
        self.push("gather_rows", Tensor::from_raw(shape, out), Op::Gather(a, index), rg)
    }

    // ---- reductions -----------------------------------------------------

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(Error::shape(op, s, &[axis]));
        }
        Ok(split_axis(s, axis))
    }

    fn reduced_shape(&self, a: Var, axis: usize) -> Vec<usize> {
        let mut s = self.shape(a).to_vec();
        s.remove(axis);
        s
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("sum", a, axis)?;
        let out = reduce(self.value(a).data(), outer, len, inner, |xs| xs.iter().sum());
        let shape = self.reduced_shape(a, axis);
        let rg = self.rg(a);
        self.push("sum", Tensor::from_raw(shape, out), Op::Sum(a, axis), rg)
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("mean", a, axis)?;
        let out = reduce(self.value(a).data(), outer, len, inner, |xs| {
            xs.iter().sum::<f64>() / xs.len() as f64
        });
        let shape = self.reduced_shape(a, axis);
        let rg = self.rg(a);
        self.push("mean", Tensor::from_raw(shape, out), Op::Mean(a, axis), rg)
    }

    /// Maximum along `axis`; ties resolve to the lowest index.
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("max", a, axis)?;
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = 0;
                let mut best_v = x[base];
                for j in 1..len {
                    let v = x[base + j * inner];
                    if v > best_v {
                        best = j;
                        best_v = v;
                    }
                }
                out.push(best_v);
                arg.push(best as u32);
            }
        }
        let shape = self.reduced_shape(a, axis);
        let rg = self.rg(a);
        self.push("max", Tensor::from_raw(shape, out), Op::Max(a, axis, arg), rg)
    }

    // ---- normalizations -------------------------------------------------

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("softmax", a, axis)?;
        let mut out = self.value(a).data().to_vec();
        for_each_lane(&mut out, outer, len, inner, |lane| {
            let m = lane.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut z = 0.0;
            for v in lane.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in lane.iter_mut() {
                *v /= z;
            }
        });
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push("softmax", Tensor::from_raw(shape, out), Op::Softmax(a, axis), rg)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("log_softmax", a, axis)?;
        let mut out = self.value(a).data().to_vec();
        for_each_lane(&mut out, outer, len, inner, |lane| {
            let m = lane.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = m + lane.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in lane.iter_mut() {
                *v -= lse;
            }
        });
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push("log_softmax", Tensor::from_raw(shape, out), Op::LogSoftmax(a, axis), rg)
    }

    /// Normalizes to zero mean and unit variance along `axis` (no affine).
    pub fn layer_norm(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("layer_norm", a, axis)?;
        let mut out = self.value(a).data().to_vec();
        let mut inv_std = Vec::with_capacity(outer * inner);
        for_each_lane(&mut out, outer, len, inner, |lane| {
            let n = lane.len() as f64;
            let mean = lane.iter().sum::<f64>() / n;
            let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let r = 1.0 / (var + eps).sqrt();
            for v in lane.iter_mut() {
                *v = (*v - mean) * r;
            }
            inv_std.push(r);
        });
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(
            "layer_norm",
            Tensor::from_raw(shape, out),
            Op::LayerNorm(a, axis, inv_std),
            rg,
        )
    }

    /// Scales each lane along `axis` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("l2_normalize", a, axis)?;
        let mut out = self.value(a).data().to_vec();
        let mut norms = Vec::with_capacity(outer * inner);
        for_each_lane(&mut out, outer, len, inner, |lane| {
            let norm = lane.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in lane.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        });
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(
            "l2_normalize",
            Tensor::from_raw(shape, out),
            Op::L2Normalize(a, axis, norms),
            rg,
        )
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut result = Grads::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let y = self.value(Var(idx)).data();
            match &node.op {
                Op::Leaf => {
                    result.leaves.insert(Var(idx), g);
                }
                Op::Param(id) => result.params.entries.push((*id, g)),
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if self.rg(*a) {
                        let ga = slot(&mut grads, *a, m * k);
                        gemm(m, n, k, &g, false, self.value(*b).data(), true, ga);
                    }
                    if self.rg(*b) {
                        let gb = slot(&mut grads, *b, k * n);
                        gemm(k, m, n, self.value(*a).data(), true, &g, false, gb);
                    }
                }
                Op::Transpose(a) => {
                    let s = self.shape(*a);
                    let (m, n) = (s[0], s[1]);
                    let ga = slot(&mut grads, *a, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if self.rg(*a) {
                        add_into(slot(&mut grads, *a, g.len()), &g);
                    }
                    if self.rg(*b) {
                        let bl = self.value(*b).len();
                        let gb = slot(&mut grads, *b, bl);
                        for (i, v) in g.iter().enumerate() {
                            gb[i % bl] += sign * v;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (x, w) = (self.value(*a).data(), self.value(*b).data());
                    let bl = w.len();
                    if self.rg(*a) {
                        let ga = slot(&mut grads, *a, g.len());
                        for (i, v) in g.iter().enumerate() {
                            ga[i] += v * w[i % bl];
                        }
                    }
                    if self.rg(*b) {
                        let gb = slot(&mut grads, *b, bl);
                        for (i, v) in g.iter().enumerate() {
                            gb[i % bl] += v * x[i];
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let ga = slot(&mut grads, *a, g.len());
                    for (d, v) in ga.iter_mut().zip(&g) {
                        *d += s * v;
                    }
                }
                Op::Concat(parts, axis) => {
                    let shape = self.shape(Var(idx));
                    let (outer, _, inner) = split_axis(shape, *axis);
                    let mut offset = 0;
                    for o in 0..outer {
                        for &p in parts {
                            let block = self.shape(p)[*axis] * inner;
                            if self.rg(p) {
                                let len = self.value(p).len();
                                let gp = slot(&mut grads, p, len);
                                add_into(&mut gp[o * block..(o + 1) * block], &g[offset..offset + block]);
                            }
                            offset += block;
                        }
                    }
                }
                Op::Narrow(a, axis, start) => {
                    let sa = self.shape(*a);
                    let (outer, full, inner) = split_axis(sa, *axis);
                    let len = self.shape(Var(idx))[*axis];
                    let ga = slot(&mut grads, *a, outer * full * inner);
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        add_into(&mut ga[dst..dst + len * inner], &g[src..src + len * inner]);
                    }
                }
                Op::Reshape(a) => add_into(slot(&mut grads, *a, g.len()), &g),
                Op::Gather(a, index) => {
                    let t = self.value(*a);
                    let cols = t.cols();
                    let ga = slot(&mut grads, *a, t.len());
                    for (r, &src) in index.iter().enumerate() {
                        if src != ZERO_ROW {
                            let s = src as usize * cols;
                            add_into(&mut ga[s..s + cols], &g[r * cols..(r + 1) * cols]);
                        }
                    }
                }
                Op::Sum(a, axis) | Op::Mean(a, axis) => {
                    let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                    let f = if matches!(node.op, Op::Mean(..)) { 1.0 / len as f64 } else { 1.0 };
                    let ga = slot(&mut grads, *a, outer * len * inner);
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                ga[(o * len + j) * inner + i] += f * g[o * inner + i];
                            }
                        }
                    }
                }
                Op::Max(a, axis, arg) => {
                    let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                    let ga = slot(&mut grads, *a, outer * len * inner);
                    for o in 0..outer {
                        for i in 0..inner {
                            let j = arg[o * inner + i] as usize;
                            ga[(o * len + j) * inner + i] += g[o * inner + i];
                        }
                    }
                }
                Op::Relu(a) => {
                    let ga = slot(&mut grads, *a, g.len());
                    for ((d, v), out) in ga.iter_mut().zip(&g).zip(y) {
                        if *out > 0.0 {
                            *d += v;
                        }
                    }
                }
                Op::Softmax(a, axis) => {
                    let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                    let mut local = g.clone();
                    lanes_with(&mut local, y, outer, len, inner, |gl, yl| {
                        let dot: f64 = gl.iter().zip(yl).map(|(a, b)| a * b).sum();
                        for (d, yv) in gl.iter_mut().zip(yl) {
                            *d = yv * (*d - dot);
                        }
                    });
                    add_into(slot(&mut grads, *a, g.len()), &local);
                }
                Op::LogSoftmax(a, axis) => {
                    let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                    let mut local = g.clone();
                    lanes_with(&mut local, y, outer, len, inner, |gl, yl| {
                        let total: f64 = gl.iter().sum();
                        for (d, yv) in gl.iter_mut().zip(yl) {
                            *d -= yv.exp() * total;
                        }
                    });
                    add_into(slot(&mut grads, *a, g.len()), &local);
                }
                Op::LayerNorm(a, axis, inv_std) => {
                    let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                    let mut local = g.clone();
                    let mut lane_idx = 0;
                    lanes_with(&mut local, y, outer, len, inner, |gl, yl| {
                        let n = gl.len() as f64;
                        let mean_g = gl.iter().sum::<f64>() / n;
                        let mean_gy = gl.iter().zip(yl).map(|(a, b)| a * b).sum::<f64>() / n;
                        let r = inv_std[lane_idx];
                        for (d, yv) in gl.iter_mut().zip(yl) {
                            *d = r * (*d - mean_g - yv * mean_gy);
                        }
                        lane_idx += 1;
                    });
                    add_into(slot(&mut grads, *a, g.len()), &local);
                }
                Op::L2Normalize(a, axis, norms) => {
                    let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                    let mut local = g.clone();
                    let mut lane_idx = 0;
                    lanes_with(&mut local, y, outer, len, inner, |gl, yl| {
                        let dot: f64 = gl.iter().zip(yl).map(|(a, b)| a * b).sum();
                        let norm = norms[lane_idx];
                        for (d, yv) in gl.iter_mut().zip(yl) {
                            *d = (*d - yv * dot) / norm;
                        }
                        lane_idx += 1;
                    });
                    add_into(slot(&mut grads, *a, g.len()), &local);
                }
                Op::Acos(a) => {
                    let x = self.value(*a).data();
                    let ga = slot(&mut grads, *a, g.len());
                    let bound = 1.0 - ACOS_EPS;
                    for ((d, v), &xi) in ga.iter_mut().zip(&g).zip(x) {
                        if xi.abs() <= bound {
                            *d -= v / (1.0 - xi * xi).sqrt();
                        }
                    }
                }
                Op::Cos(a) => {
                    let x = self.value(*a).data();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((d, v), xi) in ga.iter_mut().zip(&g).zip(x) {
                        *d -= v * xi.sin();
                    }
                }
                Op::Sqrt(a) => {
                    let ga = slot(&mut grads, *a, g.len());
                    for ((d, v), yi) in ga.iter_mut().zip(&g).zip(y) {
                        *d += v / (2.0 * yi);
                    }
                }
                Op::Log(a) => {
                    let x = self.value(*a).data();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((d, v), xi) in ga.iter_mut().zip(&g).zip(x) {
                        *d += v / xi;
                    }
                }
                Op::Exp(a) => {
                    let ga = slot(&mut grads, *a, g.len());
                    for ((d, v), yi) in ga.iter_mut().zip(&g).zip(y) {
                        *d += v * yi;
                    }
                }
            }
        }

        for (&id, &v) in &self.param_nodes {
            if self.rg(v) && result.params.get(id).is_none() {
                result.unreached.push(self.store.get(id).name.clone());
            }
        }
        if !result.unreached.is_empty() {
            result.unreached.sort();
            log::debug!("parameters not reached by backward: {:?}", result.unreached);
        }
        result.params.entries.sort_by_key(|(id, _)| *id);
        if result.params.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite { op: "backward" });
        }
        Ok(result)
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `b` broadcasts against `a` when, ignoring leading unit axes, its shape is a
/// suffix of `a`'s shape.
fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    let first = b.iter().position(|&d| d != 1).unwrap_or(b.len());
    let b = &b[first..];
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn reduce(x: &[f64], outer: usize, len: usize, inner: usize, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(outer * inner);
    let mut lane = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            for (j, l) in lane.iter_mut().enumerate() {
                *l = x[(o * len + j) * inner + i];
            }
            out.push(f(&lane));
        }
    }
    out
}

/// Applies `f` to every lane along the reduced axis, in (outer, inner) order.
fn for_each_lane(x: &mut [f64], outer: usize, len: usize, inner: usize, mut f: impl FnMut(&mut [f64])) {
    if inner == 1 {
        for lane in x.chunks_mut(len) {
            f(lane);
        }
        return;
    }
    let mut lane = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            for (j, l) in lane.iter_mut().enumerate() {
                *l = x[(o * len + j) * inner + i];
            }
            f(&mut lane);
            for (j, l) in lane.iter().enumerate() {
                x[(o * len + j) * inner + i] = *l;
            }
        }
    }
}

/// Like [`for_each_lane`] with a read-only companion buffer laid out identically.
fn lanes_with(
    x: &mut [f64],
    y: &[f64],
    outer: usize,
    len: usize,
    inner: usize,
    mut f: impl FnMut(&mut [f64], &[f64]),
) {
    if inner == 1 {
        for (lane, ylane) in x.chunks_mut(len).zip(y.chunks(len)) {
            f(lane, ylane);
        }
        return;
    }
    let mut lane = vec![0.0; len];
    let mut ylane = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            for j in 0..len {
                lane[j] = x[(o * len + j) * inner + i];
                ylane[j] = y[(o * len + j) * inner + i];
            }
            f(&mut lane, &ylane);
            for (j, l) in lane.iter().enumerate() {
                x[(o * len + j) * inner + i] = *l;
            }
        }
    }
}

/// `c += op(a) · op(b)` with `op(a)` of shape `m×k` and `op(b)` of shape `k×n`.
/// A transposed operand is stored in the transposed (row-major) layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: slice lengths match the declared extents and strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
