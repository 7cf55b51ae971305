//! Reverse-mode tape.
//!
//! Every forward call evaluates eagerly and appends one node. Nodes only
//! reference earlier nodes, so walking the list backwards is a valid
//! reverse topological order.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::scalar::Scalar;

use super::params::ParamId;
use super::tensor::{self, numel, Tensor};
use super::TensorError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Exp,
    Log,
    Tanh,
    Relu,
    Sigmoid,
    Softplus,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Sum { x: Var, axis: Option<usize> },
    Mean { x: Var, axis: Option<usize> },
    Unary(Unary, Var),
    Softmax { x: Var, axis: usize },
    Scale(Var, T),
    Offset(Var),
    Slice { x: Var, axis: usize, start: usize },
    Broadcast(Var),
    GatherRows { x: Var, index: Arc<[usize]> },
    ScatterAddRows { x: Var, index: Arc<[usize]> },
    SegmentSoftmax { x: Var, segment: Arc<[usize]>, segments: usize },
    ScaleRows { x: Var, w: Var },
    PairReluSum { a: Var, b: Var, pairs: Arc<[(usize, usize)]> },
    GatherTimeRelu { x: Var, w: Var, index: Arc<[usize]>, dt: Arc<[T]> },
    GatherRowDot { x: Var, y: Var, index: Arc<[usize]> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// A single-owner computation record.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A differentiable input bound to a stored parameter.
    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        let v = self.leaf(value);
        self.nodes[v.0].param = Some(id);
        v
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, make: fn(Var, Var) -> Op<T>, f: fn(T, T) -> T) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        let out = va.zip_map(vb, f);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, make(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        match (va.dims2(), vb.dims2()) {
            (Some((_, k)), Some((k2, _))) if k == k2 => {}
            _ => return Err(shape_err("matmul", va.shape(), vb.shape())),
        }
        let out = tensor::matmul(va, vb);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x W + b` with `b` a row (`[n]` or `[1, n]`) added to every output row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let n = match (vx.dims2(), vw.dims2()) {
            (Some((_, k)), Some((k2, n))) if k == k2 => n,
            _ => return Err(shape_err("linear", vx.shape(), vw.shape())),
        };
        if vb.numel() != n || vb.rank() > 2 || (vb.rank() == 2 && vb.shape()[0] != 1) {
            return Err(shape_err("linear", vw.shape(), vb.shape()));
        }
        let mut out = tensor::matmul(vx, vw);
        for row in out.data_mut().chunks_mut(n.max(1)) {
            for (o, &c) in row.iter_mut().zip(vb.data()) {
                *o += c;
            }
        }
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    /// Concatenation along `axis`; every other extent must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self.value(*parts.first().ok_or(TensorError::Empty("concat"))?).shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::Axis { op: "concat", axis, shape: first });
        }
        for p in &parts[1..] {
            let s = self.value(*p).shape();
            let ok = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", &first, s));
            }
        }
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| self.value(*p)).collect();
        let out = tensor::concat(&values, axis);
        let rg = self.needs(parts);
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let rank = self.shape(*parts.first().ok_or(TensorError::Empty("concat"))?).len();
        self.concat(parts, rank.saturating_sub(1))
    }

    fn reduce(&mut self, x: Var, axis: Option<usize>, mean: bool) -> Result<Var, TensorError> {
        let vx = self.value(x);
        let out = match axis {
            None => {
                let s = vx.sum_all();
                let s = if mean { s / T::from_usize(vx.numel().max(1)).unwrap() } else { s };
                Tensor::scalar(s)
            }
            Some(ax) => {
                if ax >= vx.rank() {
                    return Err(TensorError::Axis { op: "sum", axis: ax, shape: vx.shape().to_vec() });
                }
                let mut r = tensor::reduce_axis(vx, ax);
                if mean {
                    let n = T::from_usize(vx.shape()[ax].max(1)).unwrap();
                    r = r.map(|v| v / n);
                }
                r
            }
        };
        let rg = self.needs(&[x]);
        let op = if mean { Op::Mean { x, axis } } else { Op::Sum { x, axis } };
        Ok(self.push(out, op, rg))
    }

    /// Sum over one axis, or over everything when `axis` is `None`.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        self.reduce(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        self.reduce(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        self.reduce(x, None, false).expect("full reduction never fails")
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let f: fn(T) -> T = match kind {
            Unary::Exp => |v| v.exp(),
            Unary::Log => |v| v.ln(),
            Unary::Tanh => |v| v.tanh(),
            Unary::Relu => |v| if v > T::zero() { v } else { T::zero() },
            Unary::Sigmoid => sigmoid,
            Unary::Softplus => softplus,
        };
        let out = self.value(x).map(f);
        let rg = self.needs(&[x]);
        self.push(out, Op::Unary(kind, x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let vx = self.value(x);
        if axis >= vx.rank() {
            return Err(TensorError::Axis { op: "softmax", axis, shape: vx.shape().to_vec() });
        }
        let out = tensor::softmax_axis(vx, axis);
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Multiplies by a fixed scalar.
    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.needs(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Adds a fixed scalar.
    pub fn offset(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.needs(&[x]);
        self.push(out, Op::Offset(x), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same shape")
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let vx = self.value(x);
        if axis >= vx.rank() || start + len > vx.shape()[axis] {
            return Err(TensorError::Slice { axis, start, len, shape: vx.shape().to_vec() });
        }
        let out = tensor::slice_axis(vx, axis, start, len);
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Slice { x, axis, start }, rg))
    }

    /// Leading-axis expansion: `x`'s shape, stripped of leading unit axes,
    /// must be a suffix of `shape`.
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let vx = self.value(x);
        let core: Vec<usize> = vx.shape().iter().copied().skip_while(|&d| d == 1).collect();
        if core.len() > shape.len() || shape[shape.len() - core.len()..] != core[..] {
            return Err(shape_err("broadcast", vx.shape(), shape));
        }
        let reps = numel(shape) / vx.numel().max(1);
        let mut data = Vec::with_capacity(numel(shape));
        for _ in 0..reps {
            data.extend_from_slice(vx.data());
        }
        let out = Tensor::new(shape.to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Broadcast(x), rg))
    }

    /// `x + b` where `b` is a row (`[d]` or `[1, d]`) added to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let bb = self.broadcast(b, &shape)?;
        self.add(x, bb)
    }

    /// Rows of a matrix selected by `index` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var, TensorError> {
        let vx = self.value(x);
        let (n, d) = vx.dims2().ok_or_else(|| shape_err("gather_rows", vx.shape(), &[]))?;
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(TensorError::Index { op: "gather_rows", index: bad, len: n });
        }
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in index.iter() {
            data.extend_from_slice(vx.row(i));
        }
        let out = Tensor::new(vec![index.len(), d], data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::GatherRows { x, index }, rg))
    }

    /// Row `r` of `x` is added into row `index[r]` of an `rows x d` zero matrix.
    pub fn scatter_add_rows(&mut self, x: Var, index: Arc<[usize]>, rows: usize) -> Result<Var, TensorError> {
        let vx = self.value(x);
        let (m, d) = vx.dims2().ok_or_else(|| shape_err("scatter_add_rows", vx.shape(), &[]))?;
        if m != index.len() {
            return Err(shape_err("scatter_add_rows", vx.shape(), &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index { op: "scatter_add_rows", index: bad, len: rows });
        }
        let mut out = Tensor::zeros(&[rows, d]);
        {
            let od = out.data_mut();
            for (r, &i) in index.iter().enumerate() {
                for (o, &v) in od[i * d..(i + 1) * d].iter_mut().zip(vx.row(r)) {
                    *o += v;
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::ScatterAddRows { x, index }, rg))
    }

    /// Softmax of a column vector `[m, 1]` taken separately within each
    /// segment; `segment[r]` names the segment of row `r`.
    pub fn segment_softmax(&mut self, x: Var, segment: Arc<[usize]>, segments: usize) -> Result<Var, TensorError> {
        let vx = self.value(x);
        if vx.shape() != [segment.len(), 1] {
            return Err(shape_err("segment_softmax", vx.shape(), &[segment.len(), 1]));
        }
        if let Some(&bad) = segment.iter().find(|&&s| s >= segments) {
            return Err(TensorError::Index { op: "segment_softmax", index: bad, len: segments });
        }
        let xs = vx.data();
        let mut max = vec![T::neg_infinity(); segments];
        for (&s, &v) in segment.iter().zip(xs) {
            max[s] = max[s].max(v);
        }
        let mut total = vec![T::zero(); segments];
        let mut out: Vec<T> = segment.iter().zip(xs).map(|(&s, &v)| (v - max[s]).exp()).collect();
        for (&s, &e) in segment.iter().zip(&out) {
            total[s] += e;
        }
        for (o, &s) in out.iter_mut().zip(segment.iter()) {
            *o /= total[s];
        }
        let out = Tensor::new(vec![segment.len(), 1], out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::SegmentSoftmax { x, segment, segments }, rg))
    }

    /// Row `i` of `x` multiplied by `w[i]`, where `w` is `[m, 1]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var, TensorError> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (m, d) = vx.dims2().ok_or_else(|| shape_err("scale_rows", vx.shape(), vw.shape()))?;
        if vw.shape() != [m, 1] {
            return Err(shape_err("scale_rows", vx.shape(), vw.shape()));
        }
        let mut out = vx.clone();
        for (r, chunk) in out.data_mut().chunks_mut(d.max(1)).enumerate().take(m) {
            let s = vw.data()[r];
            for v in chunk {
                *v *= s;
            }
        }
        let rg = self.needs(&[x, w]);
        Ok(self.push(out, Op::ScaleRows { x, w }, rg))
    }

    /// `out[i] = sum over (i, j) in pairs of relu(a[i] + b[j])`, with `out`
    /// shaped like `a`.
    pub fn pair_relu_sum(&mut self, a: Var, b: Var, pairs: Arc<[(usize, usize)]>) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (n, d) = va.dims2().ok_or_else(|| shape_err("pair_relu_sum", va.shape(), vb.shape()))?;
        let (nb, db) = vb.dims2().ok_or_else(|| shape_err("pair_relu_sum", va.shape(), vb.shape()))?;
        if d != db {
            return Err(shape_err("pair_relu_sum", va.shape(), vb.shape()));
        }
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= n || j >= nb) {
            return Err(TensorError::Index { op: "pair_relu_sum", index: i.max(j), len: n.min(nb) });
        }
        let mut out = Tensor::zeros(&[n, d]);
        {
            let od = out.data_mut();
            for &(i, j) in pairs.iter() {
                let (ra, rb) = (va.row(i), vb.row(j));
                for k in 0..d {
                    let s = ra[k] + rb[k];
                    if s > T::zero() {
                        od[i * d + k] += s;
                    }
                }
            }
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::PairReluSum { a, b, pairs }, rg))
    }

    /// `out[e] = relu(x[index[e]] + dt[e] * w)` with `w` a row of `x`'s width.
    pub fn gather_time_relu(&mut self, x: Var, w: Var, index: Arc<[usize]>, dt: Arc<[T]>) -> Result<Var, TensorError> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (n, d) = vx.dims2().ok_or_else(|| shape_err("gather_time_relu", vx.shape(), vw.shape()))?;
        if vw.numel() != d || vw.rank() > 2 || (vw.rank() == 2 && vw.shape()[0] != 1) {
            return Err(shape_err("gather_time_relu", vx.shape(), vw.shape()));
        }
        if index.len() != dt.len() {
            return Err(shape_err("gather_time_relu", &[index.len()], &[dt.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(TensorError::Index { op: "gather_time_relu", index: bad, len: n });
        }
        let mut data = Vec::with_capacity(index.len() * d);
        for (&i, &t) in index.iter().zip(dt.iter()) {
            data.extend(vx.row(i).iter().zip(vw.data()).map(|(&a, &b)| {
                let v = a + t * b;
                if v > T::zero() {
                    v
                } else {
                    T::zero()
                }
            }));
        }
        let out = Tensor::new(vec![index.len(), d], data)?;
        let rg = self.needs(&[x, w]);
        Ok(self.push(out, Op::GatherTimeRelu { x, w, index, dt }, rg))
    }

    /// `out[e] = <x[e], y[index[e]]>`, shaped `[rows of x, 1]`.
    pub fn gather_row_dot(&mut self, x: Var, y: Var, index: Arc<[usize]>) -> Result<Var, TensorError> {
        let (vx, vy) = (self.value(x), self.value(y));
        let (m, d) = vx.dims2().ok_or_else(|| shape_err("gather_row_dot", vx.shape(), vy.shape()))?;
        let (n, dy) = vy.dims2().ok_or_else(|| shape_err("gather_row_dot", vx.shape(), vy.shape()))?;
        if d != dy || m != index.len() {
            return Err(shape_err("gather_row_dot", vx.shape(), vy.shape()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(TensorError::Index { op: "gather_row_dot", index: bad, len: n });
        }
        let data = index.iter().enumerate().map(|(r, &i)| vx.row(r).iter().zip(vy.row(i)).fold(T::zero(), |acc, (&a, &b)| acc + a * b)).collect();
        let out = Tensor::new(vec![m, 1], data)?;
        let rg = self.needs(&[x, y]);
        Ok(self.push(out, Op::GatherRowDot { x, y, index }, rg))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let v = self.value(loss);
        if v.numel() != 1 {
            return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
        }
        let seed = Tensor::full(v.shape(), T::one());
        self.backward_with(loss, seed)
    }

    /// Reverse sweep seeded with an arbitrary cotangent for `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>, TensorError> {
        if seed.shape() != self.shape(output) {
            return Err(shape_err("backward", self.shape(output), seed.shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(output.0 + 1)
            .filter_map(|(i, n)| n.param.map(|p| (p, Var(i))))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut Tensor<T>)) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(slot);
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |s| s.add_assign(g));
                self.acc(grads, *b, |s| s.add_assign(g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |s| s.add_assign(g));
                self.acc(grads, *b, |s| {
                    for (o, &v) in s.data_mut().iter_mut().zip(g.data()) {
                        *o -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |s| s.add_assign(&g.zip_map(vb, |x, y| x * y)));
                self.acc(grads, *b, |s| s.add_assign(&g.zip_map(va, |x, y| x * y)));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |s| tensor::matmul_grad_lhs(g, vb, s));
                self.acc(grads, *b, |s| tensor::matmul_grad_rhs(va, g, s));
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                self.acc(grads, *x, |s| tensor::matmul_grad_lhs(g, vw, s));
                self.acc(grads, *w, |s| tensor::matmul_grad_rhs(vx, g, s));
                let n = vw.shape()[1];
                self.acc(grads, *b, |s| {
                    for row in g.data().chunks(n.max(1)) {
                        for (o, &v) in s.data_mut().iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    let piece = tensor::slice_axis(g, *axis, start, len);
                    self.acc(grads, *p, |s| s.add_assign(&piece));
                    start += len;
                }
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let mean = matches!(self.nodes[id].op, Op::Mean { .. });
                let xs = self.shape(*x).to_vec();
                let expanded = match axis {
                    None => {
                        let n = if mean { T::from_usize(numel(&xs).max(1)).unwrap() } else { T::one() };
                        Tensor::full(&xs, g.data()[0] / n)
                    }
                    Some(ax) => {
                        let n = if mean { T::from_usize(xs[*ax].max(1)).unwrap() } else { T::one() };
                        tensor::expand_axis(g, &xs, *ax, T::one() / n)
                    }
                };
                self.acc(grads, *x, |s| s.add_assign(&expanded));
            }
            Op::Unary(kind, x) => {
                let vx = self.value(*x);
                let local: Tensor<T> = match kind {
                    Unary::Exp => g.zip_map(y, |g, y| g * y),
                    Unary::Log => g.zip_map(vx, |g, x| g / x),
                    Unary::Tanh => g.zip_map(y, |g, y| g * (T::one() - y * y)),
                    Unary::Relu => g.zip_map(vx, |g, x| if x > T::zero() { g } else { T::zero() }),
                    Unary::Sigmoid => g.zip_map(y, |g, y| g * y * (T::one() - y)),
                    Unary::Softplus => g.zip_map(vx, |g, x| g * sigmoid(x)),
                };
                self.acc(grads, *x, |s| s.add_assign(&local));
            }
            Op::Softmax { x, axis } => {
                let local = tensor::softmax_axis_grad(y, g, *axis);
                self.acc(grads, *x, |s| s.add_assign(&local));
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc(grads, *x, |s| {
                    for (o, &v) in s.data_mut().iter_mut().zip(g.data()) {
                        *o += v * c;
                    }
                });
            }
            Op::Offset(x) => self.acc(grads, *x, |s| s.add_assign(g)),
            Op::Slice { x, axis, start } => {
                self.acc(grads, *x, |s| tensor::unslice_add(s, g, *axis, *start));
            }
            Op::Broadcast(x) => {
                self.acc(grads, *x, |s| {
                    let n = s.numel();
                    let sd = s.data_mut();
                    for chunk in g.data().chunks(n.max(1)) {
                        for (o, &v) in sd.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let d = g.shape()[1];
                self.acc(grads, *x, |s| {
                    let sd = s.data_mut();
                    for (r, &i) in index.iter().enumerate() {
                        for k in 0..d {
                            sd[i * d + k] += g.data()[r * d + k];
                        }
                    }
                });
            }
            Op::ScatterAddRows { x, index } => {
                let d = g.shape()[1];
                self.acc(grads, *x, |s| {
                    let sd = s.data_mut();
                    for (r, &i) in index.iter().enumerate() {
                        for k in 0..d {
                            sd[r * d + k] += g.data()[i * d + k];
                        }
                    }
                });
            }
            Op::SegmentSoftmax { x, segment, segments } => {
                let mut dot = vec![T::zero(); *segments];
                for ((&s, &yv), &gv) in segment.iter().zip(y.data()).zip(g.data()) {
                    dot[s] += yv * gv;
                }
                self.acc(grads, *x, |acc| {
                    for (r, o) in acc.data_mut().iter_mut().enumerate() {
                        *o += y.data()[r] * (g.data()[r] - dot[segment[r]]);
                    }
                });
            }
            Op::ScaleRows { x, w } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let d = vx.shape()[1];
                self.acc(grads, *x, |s| {
                    for (r, chunk) in s.data_mut().chunks_mut(d.max(1)).enumerate() {
                        let wr = vw.data()[r];
                        for (k, o) in chunk.iter_mut().enumerate() {
                            *o += g.data()[r * d + k] * wr;
                        }
                    }
                });
                self.acc(grads, *w, |s| {
                    for (r, o) in s.data_mut().iter_mut().enumerate() {
                        let mut t = T::zero();
                        for k in 0..d {
                            t += g.data()[r * d + k] * vx.data()[r * d + k];
                        }
                        *o += t;
                    }
                });
            }
            Op::GatherTimeRelu { x, w, index, dt } => {
                let d = y.shape()[1];
                let mut gx = self.nodes[x.0].requires_grad.then(|| Tensor::zeros(self.shape(*x)));
                let mut gw = self.nodes[w.0].requires_grad.then(|| vec![T::zero(); d]);
                for (e, (&i, &t)) in index.iter().zip(dt.iter()).enumerate() {
                    for k in 0..d {
                        if y.data()[e * d + k] > T::zero() {
                            let gv = g.data()[e * d + k];
                            if let Some(gx) = gx.as_mut() {
                                gx.data_mut()[i * d + k] += gv;
                            }
                            if let Some(gw) = gw.as_mut() {
                                gw[k] += gv * t;
                            }
                        }
                    }
                }
                if let Some(gx) = gx {
                    self.acc(grads, *x, |s| s.add_assign(&gx));
                }
                if let Some(gw) = gw {
                    self.acc(grads, *w, |s| {
                        for (o, v) in s.data_mut().iter_mut().zip(gw) {
                            *o += v;
                        }
                    });
                }
            }
            Op::GatherRowDot { x, y: yv, index } => {
                let (vx, vy) = (self.value(*x), self.value(*yv));
                let d = vx.shape()[1];
                self.acc(grads, *x, |s| {
                    for (r, &i) in index.iter().enumerate() {
                        let gr = g.data()[r];
                        for (o, &b) in s.data_mut()[r * d..(r + 1) * d].iter_mut().zip(vy.row(i)) {
                            *o += gr * b;
                        }
                    }
                });
                self.acc(grads, *yv, |s| {
                    for (r, &i) in index.iter().enumerate() {
                        let gr = g.data()[r];
                        for (o, &a) in s.data_mut()[i * d..(i + 1) * d].iter_mut().zip(vx.row(r)) {
                            *o += gr * a;
                        }
                    }
                });
            }
            Op::PairReluSum { a, b, pairs } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let d = va.shape()[1];
                let mut ga = self.nodes[a.0].requires_grad.then(|| Tensor::zeros(va.shape()));
                let mut gb = self.nodes[b.0].requires_grad.then(|| Tensor::zeros(vb.shape()));
                for &(i, j) in pairs.iter() {
                    for k in 0..d {
                        if va.data()[i * d + k] + vb.data()[j * d + k] > T::zero() {
                            let gv = g.data()[i * d + k];
                            if let Some(ga) = ga.as_mut() {
                                ga.data_mut()[i * d + k] += gv;
                            }
                            if let Some(gb) = gb.as_mut() {
                                gb.data_mut()[j * d + k] += gv;
                            }
                        }
                    }
                }
                if let Some(ga) = ga {
                    self.acc(grads, *a, |s| s.add_assign(&ga));
                }
                if let Some(gb) = gb {
                    self.acc(grads, *b, |s| s.add_assign(&gb));
                }
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log(1 + e^-|x|)
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Result of a reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the swept output with respect to `v`, if `v` contributed.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients keyed by parameter, summed over every binding of the same
    /// parameter on the tape.
    pub fn params(&self) -> BTreeMap<ParamId, Tensor<T>> {
        let mut out: BTreeMap<ParamId, Tensor<T>> = BTreeMap::new();
        for &(p, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                match out.get_mut(&p) {
                    Some(acc) => acc.add_assign(g),
                    None => {
                        out.insert(p, g.clone());
                    }
                }
            }
        }
        out
    }
}
