//! Reverse-mode differentiation over a per-computation tape.
//!
//! A [`Tape`] is built fresh for every forward pass: leaves and parameters
//! are copied in, each op appends one node, and [`Tape::backward`] walks the
//! nodes in reverse. Nothing persists between steps except parameter
//! gradients folded back into the [`ParamStore`].

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    ScaleRows(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv1d { x: Var, w: Var, b: Option<Var> },
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, axis: usize, eps: f64 },
    Mean(Var),
    Sum(Var),
    Mse(Var, Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Rows { x: Var, start: usize },
    ConcatRows(Var, Var),
    GatherRows { table: Var, ids: Vec<usize> },
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug)]
pub struct Tape<'s> {
    nodes: Vec<Node>,
    leaf_grads: BTreeMap<usize, Vec<f64>>,
    store: Option<&'s ParamStore>,
    bound: BTreeMap<ParamId, Var>,
    frozen: BTreeSet<ParamId>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits a shape around `axis` into (outer, axis extent, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(contract(alloc::format!(
            "{op} expects a rank-{rank} tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

impl<'s> Tape<'s> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: BTreeMap::new(),
            store: None,
            bound: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    /// A tape that can bind parameters from `store`.
    pub fn with_params(store: &'s ParamStore) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    /// Parameters in `ids` are bound as constants from now on.
    pub fn freeze(&mut self, ids: &[ParamId]) {
        self.frozen.extend(ids.iter().copied());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    /// Copies `t` in as a leaf; it participates in differentiation iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let value = Tensor::new(t.shape(), t.data().to_vec()).expect("consistent tensor");
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = t.with_requires_grad(false);
        self.push_raw(t, Op::Leaf, false)
    }

    /// Binds a parameter from the attached store, once per tape.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound.get(&id) {
            return Ok(*v);
        }
        let store = self
            .store
            .ok_or_else(|| contract("tape has no parameter store attached"))?;
        let t = store.get(id);
        let trainable = !self.frozen.contains(&id);
        let value = Tensor::new(t.shape(), t.data().to_vec())?;
        let v = self.push_raw(value, Op::Leaf, trainable);
        self.bound.insert(id, v);
        Ok(v)
    }

    /// Gradients of every trainable bound parameter, in id order.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.bound
            .iter()
            .filter_map(|(id, v)| self.grad(*v).map(|g| (*id, g.to_vec())))
            .collect()
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn binary_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(ta.shape(), data)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.shape(), ta.data().iter().map(|x| f(*x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_same("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.unary(a, |x| x * c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.unary(a, |x| x + c);
        self.push("add_scalar", out, Op::AddScalar(a), &[a])
    }

    /// `x (R, C) + b (R)`, with `b` repeated along the columns.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        expect_rank("add_bias", tx, 2)?;
        let (r, c) = (tx.rows(), tx.cols());
        if tb.len() != r {
            return Err(mismatch("add_bias", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for (i, row) in data.chunks_mut(c).enumerate() {
            let bi = tb.data()[i];
            row.iter_mut().for_each(|v| *v += bi);
        }
        let out = Tensor::new(tx.shape(), data)?;
        self.push("add_bias", out, Op::AddBias(x, b), &[x, b])
    }

    /// `x (R, C) * g (R)`, with `g` repeated along the columns.
    pub fn scale_rows(&mut self, x: Var, g: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(g));
        expect_rank("scale_rows", tx, 2)?;
        let (r, c) = (tx.rows(), tx.cols());
        if tg.len() != r {
            return Err(mismatch("scale_rows", tx, tg));
        }
        let mut data = tx.data().to_vec();
        for (i, row) in data.chunks_mut(c).enumerate() {
            let gi = tg.data()[i];
            row.iter_mut().for_each(|v| *v *= gi);
        }
        let out = Tensor::new(tx.shape(), data)?;
        self.push("scale_rows", out, Op::ScaleRows(x, g), &[x, g])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        expect_rank("matmul", ta, 2)?;
        expect_rank("matmul", tb, 2)?;
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k {
            return Err(mismatch("matmul", ta, tb));
        }
        let (ad, bd) = (ta.data(), tb.data());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut data[i * n..(i + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let out = Tensor::new(&[m, n], data)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        expect_rank("transpose", ta, 2)?;
        let out = transposed(ta);
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    /// Stride-1 cross-correlation with same padding.
    ///
    /// `x` is `(in_channels, length)`, `w` is `(out_channels, in_channels,
    /// kernel)`, `b` is `(out_channels)`. Output position `t` sees inputs
    /// `t - (kernel-1)/2 ..= t + kernel/2`; taps falling outside the signal
    /// read zero.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        expect_rank("conv1d", tx, 2)?;
        expect_rank("conv1d", tw, 3)?;
        let (cin, len) = (tx.rows(), tx.cols());
        let (cout, wcin, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        if wcin != cin {
            return Err(mismatch("conv1d", tx, tw));
        }
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.len() != cout {
                return Err(mismatch("conv1d", tw, tb));
            }
        }
        let pad = (k - 1) / 2;
        let (xd, wd) = (tx.data(), tw.data());
        let mut data = vec![0.0; cout * len];
        for o in 0..cout {
            let orow = &mut data[o * len..(o + 1) * len];
            for c in 0..cin {
                let xrow = &xd[c * len..(c + 1) * len];
                for (kk, wv) in wd[(o * cin + c) * k..(o * cin + c + 1) * k]
                    .iter()
                    .enumerate()
                {
                    for (t, ov) in orow.iter_mut().enumerate() {
                        let src = t + kk;
                        if src >= pad && src - pad < len {
                            *ov += wv * xrow[src - pad];
                        }
                    }
                }
            }
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for (o, row) in data.chunks_mut(len).enumerate() {
                row.iter_mut().for_each(|v| *v += bd[o]);
            }
        }
        let out = Tensor::new(&[cout, len], data)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv1d", out, Op::Conv1d { x, w, b }, &inputs)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, libm::tanh);
        self.push("tanh", out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, libm::exp);
        self.push("exp", out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, libm::log);
        self.push("log", out, Op::Log(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.unary(a, |x| x.clamp(lo, hi));
        self.push("clamp", out, Op::Clamp { x: a, lo, hi }, &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.rank() {
            return Err(contract(alloc::format!(
                "softmax axis {axis} on shape {:?}",
                ta.shape()
            )));
        }
        let (outer, n, inner) = axis_split(ta.shape(), axis);
        let src = ta.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let max = (0..n)
                    .map(|k| src[idx(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..n {
                    let e = libm::exp(src[idx(k)] - max);
                    data[idx(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    data[idx(k)] /= total;
                }
            }
        }
        let out = Tensor::new(ta.shape(), data)?;
        self.push("softmax", out, Op::Softmax { x: a, axis }, &[a])
    }

    /// Normalizes to zero mean and unit (population) variance along `axis`.
    /// No affine part; compose with `mul`/`add_bias` for gain and shift.
    pub fn layer_norm(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.rank() {
            return Err(contract(alloc::format!(
                "layer_norm axis {axis} on shape {:?}",
                ta.shape()
            )));
        }
        let (outer, n, inner) = axis_split(ta.shape(), axis);
        let src = ta.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let (mean, inv) = norm_stats(src, n, idx, eps);
                for k in 0..n {
                    data[idx(k)] = (src[idx(k)] - mean) * inv;
                }
            }
        }
        let out = Tensor::new(ta.shape(), data)?;
        self.push("layer_norm", out, Op::LayerNorm { x: a, axis, eps }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(contract("mean of an empty tensor"));
        }
        let s = ta.data().iter().sum::<f64>() / ta.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean squared error, averaged over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mse", ta, tb));
        }
        if ta.is_empty() {
            return Err(contract("mse of empty tensors"));
        }
        let s = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / ta.len() as f64;
        self.push("mse", Tensor::scalar(s), Op::Mse(a, b), &[a, b])
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        expect_rank("rows", ta, 2)?;
        if start > end || end > ta.rows() {
            return Err(Error::OutOfRange {
                what: "row",
                index: end,
                len: ta.rows(),
            });
        }
        let c = ta.cols();
        let out = Tensor::new(&[end - start, c], ta.data()[start * c..end * c].to_vec())?;
        self.push("rows", out, Op::Rows { x: a, start }, &[a])
    }

    /// Stacks two rank-2 tensors with equal column counts.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        expect_rank("concat_rows", ta, 2)?;
        expect_rank("concat_rows", tb, 2)?;
        if ta.cols() != tb.cols() {
            return Err(mismatch("concat_rows", ta, tb));
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let out = Tensor::new(&[ta.rows() + tb.rows(), ta.cols()], data)?;
        self.push("concat_rows", out, Op::ConcatRows(a, b), &[a, b])
    }

    /// Row lookup: `table (V, H)` and ids -> `(ids.len(), H)`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        expect_rank("gather_rows", tt, 2)?;
        let (v, h) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= v {
                return Err(Error::OutOfRange {
                    what: "embedding",
                    index: id,
                    len: v,
                });
            }
            data.extend_from_slice(&tt.data()[id * h..(id + 1) * h]);
        }
        let out = Tensor::new(&[ids.len(), h], data)?;
        let op = Op::GatherRows {
            table,
            ids: ids.to_vec(),
        };
        self.push("gather_rows", out, op, &[table])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Propagates d`loss` to every node and adds the result into the leaf
    /// gradients. Calling it twice without a fresh tape accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 || self.value(loss).rank() > 1 {
            return Err(contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            if let Op::Leaf = self.nodes[idx].op {
                let n = g.len();
                let acc = self.leaf_grads.entry(idx).or_insert_with(|| vec![0.0; n]);
                acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d);
                continue;
            }
            self.propagate(idx, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let mut send = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, &|s| add_into(s, g));
                send(*b, &|s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                send(*a, &|s| add_into(s, g));
                send(*b, &|s| s.iter_mut().zip(g).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                send(*a, &|s| {
                    for ((x, d), y) in s.iter_mut().zip(g).zip(bd) {
                        *x += d * y;
                    }
                });
                send(*b, &|s| {
                    for ((x, d), y) in s.iter_mut().zip(g).zip(ad) {
                        *x += d * y;
                    }
                });
            }
            Op::Scale(a, c) => send(*a, &|s| s.iter_mut().zip(g).for_each(|(x, d)| *x += d * c)),
            Op::AddScalar(a) | Op::Reshape(a) => send(*a, &|s| add_into(s, g)),
            Op::AddBias(x, b) => {
                let c = node.value.cols();
                send(*x, &|s| add_into(s, g));
                send(*b, &|s| {
                    for (i, row) in g.chunks(c).enumerate() {
                        s[i] += row.iter().sum::<f64>();
                    }
                });
            }
            Op::ScaleRows(x, gain) => {
                let c = node.value.cols();
                let (xd, gd) = (self.value(*x).data(), self.value(*gain).data());
                send(*x, &|s| {
                    for (k, (v, d)) in s.iter_mut().zip(g).enumerate() {
                        *v += d * gd[k / c];
                    }
                });
                send(*gain, &|s| {
                    for (k, (d, xv)) in g.iter().zip(xd).enumerate() {
                        s[k / c] += d * xv;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let (ad, bd) = (ta.data(), tb.data());
                // dA = G B^T, dB = A^T G
                send(*a, &|s| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bd[p * n + j];
                            }
                            s[i * k + p] += acc;
                        }
                    }
                });
                send(*b, &|s| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            for j in 0..n {
                                s[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                send(*a, &|s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (cin, len) = (tx.rows(), tx.cols());
                let (cout, k) = (tw.shape()[0], tw.shape()[2]);
                let pad = (k - 1) / 2;
                let (xd, wd) = (tx.data(), tw.data());
                let taps = |f: &mut dyn FnMut(usize, usize, usize, usize)| {
                    for o in 0..cout {
                        for c in 0..cin {
                            for kk in 0..k {
                                for t in 0..len {
                                    let src = t + kk;
                                    if src >= pad && src - pad < len {
                                        f(o, c, kk, t);
                                    }
                                }
                            }
                        }
                    }
                };
                send(*x, &|s| {
                    taps(&mut |o, c, kk, t| {
                        s[c * len + t + kk - pad] += g[o * len + t] * wd[(o * cin + c) * k + kk];
                    })
                });
                send(*w, &|s| {
                    taps(&mut |o, c, kk, t| {
                        s[(o * cin + c) * k + kk] += g[o * len + t] * xd[c * len + t + kk - pad];
                    })
                });
                if let Some(b) = b {
                    send(*b, &|s| {
                        for (o, row) in g.chunks(len).enumerate() {
                            s[o] += row.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Tanh(a) => send(*a, &|s| {
                for ((x, d), y) in s.iter_mut().zip(g).zip(out) {
                    *x += d * (1.0 - y * y);
                }
            }),
            Op::Sigmoid(a) => send(*a, &|s| {
                for ((x, d), y) in s.iter_mut().zip(g).zip(out) {
                    *x += d * y * (1.0 - y);
                }
            }),
            Op::Exp(a) => send(*a, &|s| {
                for ((x, d), y) in s.iter_mut().zip(g).zip(out) {
                    *x += d * y;
                }
            }),
            Op::Log(a) => {
                let ad = self.value(*a).data();
                send(*a, &|s| {
                    for ((x, d), y) in s.iter_mut().zip(g).zip(ad) {
                        *x += d / y;
                    }
                })
            }
            Op::Relu(a) => {
                let ad = self.value(*a).data();
                send(*a, &|s| {
                    for ((x, d), y) in s.iter_mut().zip(g).zip(ad) {
                        if *y > 0.0 {
                            *x += d;
                        }
                    }
                })
            }
            Op::Clamp { x: a, lo, hi } => {
                let ad = self.value(*a).data();
                send(*a, &|s| {
                    for ((x, d), y) in s.iter_mut().zip(g).zip(ad) {
                        if *y >= *lo && *y <= *hi {
                            *x += d;
                        }
                    }
                })
            }
            Op::Softmax { x: a, axis } => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                send(*a, &|s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * n + k) * inner + i;
                            let dot: f64 = (0..n).map(|k| g[idx(k)] * out[idx(k)]).sum();
                            for k in 0..n {
                                s[idx(k)] += out[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x: a, axis, eps } => {
                let src = self.value(*a).data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                send(*a, &|s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * n + k) * inner + i;
                            let (_, inv) = norm_stats(src, n, idx, *eps);
                            let gsum: f64 = (0..n).map(|k| g[idx(k)]).sum();
                            let gx: f64 = (0..n).map(|k| g[idx(k)] * out[idx(k)]).sum();
                            let nf = n as f64;
                            for k in 0..n {
                                s[idx(k)] += inv / nf * (nf * g[idx(k)] - gsum - out[idx(k)] * gx);
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => send(*a, &|s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                send(*a, &|s| s.iter_mut().for_each(|x| *x += g[0] / n))
            }
            Op::Mse(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let scale = 2.0 * g[0] / ad.len() as f64;
                send(*a, &|s| {
                    for ((x, p), q) in s.iter_mut().zip(ad).zip(bd) {
                        *x += scale * (p - q);
                    }
                });
                send(*b, &|s| {
                    for ((x, p), q) in s.iter_mut().zip(ad).zip(bd) {
                        *x -= scale * (p - q);
                    }
                });
            }
            Op::Rows { x: a, start } => {
                let c = node.value.cols();
                send(*a, &|s| add_into(&mut s[start * c..start * c + g.len()], g));
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).len();
                send(*a, &|s| add_into(s, &g[..split]));
                send(*b, &|s| add_into(s, &g[split..]));
            }
            Op::GatherRows { table, ids } => {
                let h = node.value.cols();
                send(*table, &|s| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut s[id * h..(id + 1) * h], &g[r * h..(r + 1) * h]);
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn norm_stats(src: &[f64], n: usize, idx: impl Fn(usize) -> usize, eps: f64) -> (f64, f64) {
    let nf = n as f64;
    let mean = (0..n).map(|k| src[idx(k)]).sum::<f64>() / nf;
    let var = (0..n)
        .map(|k| {
            let d = src[idx(k)] - mean;
            d * d
        })
        .sum::<f64>()
        / nf;
    (mean, 1.0 / libm::sqrt(var + eps))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub(crate) fn transposed(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(&[c, r], data).expect("transpose keeps size")
}
