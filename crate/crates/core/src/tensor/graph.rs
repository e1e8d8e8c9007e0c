//! Reverse-mode automatic differentiation over a recorded operation list.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order; `backward` walks it once from the loss towards the
//! leaves. Shape mismatches inside the graph are programming errors and
//! panic with the offending shapes.

use super::{Scalar, Tensor};
use crate::error::{ensure, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogFloor(Var, T),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Stack(Vec<Var>),
    AttnScores(Var, Var),
    AttnContext(Var, Var),
    Conv1d(Var, Var, usize),
    MaxTime(Var, Vec<usize>),
    TimeSum(Var, Vec<T>),
    Pick(Var, Vec<usize>),
    Sum(Var),
    Dot(Var, Vec<T>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A tape of tensor operations.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn pad_of(kernel: usize) -> usize {
    kernel / 2
}

/// Unfolds `x: [B, W, C]` into `[B*W, kernel*C]` with zero "same" padding.
fn im2col<T: Scalar>(x: &[T], b: usize, w: usize, c: usize, kernel: usize) -> Vec<T> {
    let pad = pad_of(kernel);
    let width = kernel * c;
    let mut cols = vec![T::zero(); b * w * width];
    for bi in 0..b {
        for t in 0..w {
            let row = &mut cols[(bi * w + t) * width..(bi * w + t + 1) * width];
            for j in 0..kernel {
                let src = t + j;
                if src < pad || src - pad >= w {
                    continue;
                }
                let s = (bi * w + src - pad) * c;
                row[j * c..(j + 1) * c].copy_from_slice(&x[s..s + c]);
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], dx: &mut [T], b: usize, w: usize, c: usize, kernel: usize) {
    let pad = pad_of(kernel);
    let width = kernel * c;
    for bi in 0..b {
        for t in 0..w {
            let row = &cols[(bi * w + t) * width..(bi * w + t + 1) * width];
            for j in 0..kernel {
                let src = t + j;
                if src < pad || src - pad >= w {
                    continue;
                }
                let s = (bi * w + src - pad) * c;
                for (d, &g) in dx[s..s + c].iter_mut().zip(&row[j * c..(j + 1) * c]) {
                    *d += g;
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
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

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ"
        );
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(out, op, &[a, b])
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = self.value(a).map(f);
        self.push(out, op, &[a])
    }

    /// `[m, k] @ [k, n]`; the left operand may carry leading axes that are
    /// flattened into `m`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(vb.shape().len(), 2, "matmul: rhs must be 2-D");
        let (m, k) = (va.rows(), va.cols());
        let n = vb.cols();
        assert_eq!(k, vb.shape()[0], "matmul: inner dims {:?} x {:?}", va.shape(), vb.shape());
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, va.data(), false, vb.data(), false, &mut out, false);
        let mut shape = va.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = n;
        self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `[F]` bias to every row of `x: [.., F]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(bias));
        let f = vx.cols();
        assert_eq!(vb.len(), f, "add_bias: bias length");
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(f) {
            for (o, &b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddBias(x, bias), &[x, bias])
    }

    /// Scales row `r` of `x: [N, F]` by `col[r]` where `col: [N, 1]`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let (vx, vc) = (self.value(x), self.value(col));
        let f = vx.cols();
        assert_eq!(vc.len(), vx.rows(), "mul_col: column length");
        let mut out = vx.clone();
        for (row, &s) in out.data_mut().chunks_mut(f).zip(vc.data()) {
            for o in row {
                *o *= s;
            }
        }
        self.push(out, Op::MulCol(x, col), &[x, col])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let f = vx.cols();
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(f) {
            softmax_in_place(row);
        }
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_floor(&mut self, x: Var, floor: T) -> Var {
        self.unary(x, Op::LogFloor(x, floor), |v| v.max(floor).ln())
    }

    /// Row lookup `table[idx[i]]` for `table: [V, d]`; returns `[n, d]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let vt = self.value(table);
        let (v, d) = (vt.rows(), vt.cols());
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < v, "gather: index {i} out of range for {v} rows");
            out.extend_from_slice(&vt.data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::from_parts(vec![idx.len(), d], out);
        self.push(t, Op::Gather(table, idx.to_vec()), &[table])
    }

    /// Concatenation along the last axis; all parts share leading axes.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat: no parts");
        let rows = self.value(parts[0]).rows();
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.value(p).rows(), rows, "concat: row mismatch");
                self.value(p).cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(Tensor::from_parts(shape, out), Op::Concat(parts.to_vec()), parts)
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let (rows, f) = (vx.rows(), vx.cols());
        assert!(start + len <= f && len > 0, "slice: {start}+{len} exceeds {f}");
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&vx.data()[r * f + start..r * f + start + len]);
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = len;
        self.push(Tensor::from_parts(shape, out), Op::Slice(x, start), &[x])
    }

    /// Stacks `k` tensors of shape `[B, F]` into `[B, k, F]`.
    pub fn stack(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack: no parts");
        let shape0 = self.shape(parts[0]).to_vec();
        assert_eq!(shape0.len(), 2, "stack: parts must be [B, F]");
        let (b, f) = (shape0[0], shape0[1]);
        let k = parts.len();
        let mut out = vec![T::zero(); b * k * f];
        for (ti, &p) in parts.iter().enumerate() {
            assert_eq!(self.shape(p), &shape0[..], "stack: shape mismatch");
            let v = self.value(p).data();
            for bi in 0..b {
                out[(bi * k + ti) * f..(bi * k + ti + 1) * f]
                    .copy_from_slice(&v[bi * f..(bi + 1) * f]);
            }
        }
        self.push(
            Tensor::from_parts(vec![b, k, f], out),
            Op::Stack(parts.to_vec()),
            parts,
        )
    }

    /// Dot-product scores `s[b, t] = keys[b, t, :] · query[b, :]`.
    pub fn attn_scores(&mut self, keys: Var, query: Var) -> Var {
        let (vk, vq) = (self.value(keys), self.value(query));
        let [b, t, d] = dims3(vk.shape());
        assert_eq!(vq.shape(), &[b, d], "attn_scores: query shape");
        let mut out = vec![T::zero(); b * t];
        for bi in 0..b {
            let q = &vq.data()[bi * d..(bi + 1) * d];
            for ti in 0..t {
                let k = &vk.data()[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                out[bi * t + ti] = dot(k, q);
            }
        }
        self.push(
            Tensor::from_parts(vec![b, t], out),
            Op::AttnScores(keys, query),
            &[keys, query],
        )
    }

    /// Weighted sum over time `c[b, :] = Σ_t w[b, t] keys[b, t, :]`.
    pub fn attn_context(&mut self, weights: Var, keys: Var) -> Var {
        let (vw, vk) = (self.value(weights), self.value(keys));
        let [b, t, d] = dims3(vk.shape());
        assert_eq!(vw.shape(), &[b, t], "attn_context: weight shape");
        let mut out = vec![T::zero(); b * d];
        for bi in 0..b {
            let o = &mut out[bi * d..(bi + 1) * d];
            for ti in 0..t {
                let w = vw.data()[bi * t + ti];
                let k = &vk.data()[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                for (oo, &kk) in o.iter_mut().zip(k) {
                    *oo += w * kk;
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![b, d], out),
            Op::AttnContext(weights, keys),
            &[weights, keys],
        )
    }

    /// Stride-1 cross-correlation over time with zero "same" padding.
    ///
    /// `x: [B, W, C]`, `filters: [kernel*C, F]` laid out tap-major, odd kernel.
    pub fn conv1d(&mut self, x: Var, filters: Var, kernel: usize) -> Var {
        let (vx, vf) = (self.value(x), self.value(filters));
        let [b, w, c] = dims3(vx.shape());
        assert!(kernel % 2 == 1, "conv1d: kernel size must be odd");
        assert_eq!(vf.shape()[0], kernel * c, "conv1d: filter rows");
        let f = vf.cols();
        let cols = im2col(vx.data(), b, w, c, kernel);
        let mut out = vec![T::zero(); b * w * f];
        T::gemm(b * w, kernel * c, f, &cols, false, vf.data(), false, &mut out, false);
        self.push(
            Tensor::from_parts(vec![b, w, f], out),
            Op::Conv1d(x, filters, kernel),
            &[x, filters],
        )
    }

    /// Max over the time axis of `[B, W, F]`, giving `[B, F]`.
    ///
    /// Ties resolve to the earliest position.
    pub fn max_time(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let [b, w, f] = dims3(vx.shape());
        let mut out = vec![T::neg_infinity(); b * f];
        let mut arg = vec![0usize; b * f];
        for bi in 0..b {
            for t in 0..w {
                let row = &vx.data()[(bi * w + t) * f..(bi * w + t + 1) * f];
                for (fi, &v) in row.iter().enumerate() {
                    if v > out[bi * f + fi] {
                        out[bi * f + fi] = v;
                        arg[bi * f + fi] = t;
                    }
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![b, f], out),
            Op::MaxTime(x, arg),
            &[x],
        )
    }

    /// `out[b, :] = Σ_t weights[b*W + t] · x[b, t, :]` with constant weights.
    pub fn time_sum(&mut self, x: Var, weights: Vec<T>) -> Var {
        let vx = self.value(x);
        let [b, w, f] = dims3(vx.shape());
        assert_eq!(weights.len(), b * w, "time_sum: weight count");
        let mut out = vec![T::zero(); b * f];
        for bi in 0..b {
            for t in 0..w {
                let wt = weights[bi * w + t];
                if wt == T::zero() {
                    continue;
                }
                let row = &vx.data()[(bi * w + t) * f..(bi * w + t + 1) * f];
                for (o, &v) in out[bi * f..(bi + 1) * f].iter_mut().zip(row) {
                    *o += wt * v;
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![b, f], out),
            Op::TimeSum(x, weights),
            &[x],
        )
    }

    /// Picks `x[i, idx[i]]` from each row of `x: [.., V]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Var {
        let vx = self.value(x);
        let v = vx.cols();
        assert_eq!(idx.len(), vx.rows(), "pick: one index per row");
        let out = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| {
                assert!(i < v, "pick: index {i} out of range for {v}");
                vx.data()[r * v + i]
            })
            .collect::<Vec<_>>();
        let t = Tensor::vector(out);
        self.push(t, Op::Pick(x, idx.to_vec()), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// `Σ_i weights[i] · x[i]` with constant weights.
    pub fn dot_const(&mut self, x: Var, weights: Vec<T>) -> Var {
        let vx = self.value(x);
        assert_eq!(weights.len(), vx.len(), "dot_const: weight count");
        let s = dot(vx.data(), &weights);
        self.push(Tensor::scalar(s), Op::Dot(x, weights), &[x])
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        ensure!(
            self.value(loss).len() == 1,
            Contract,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::from_parts(
            self.shape(loss).to_vec(),
            vec![T::one()],
        ));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[i].value;
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if let Some(da) = self.grad_buf(grads, *a) {
                    T::gemm(m, n, k, gd, false, vb.data(), true, da, true);
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    T::gemm(k, m, n, va.data(), true, gd, false, db, true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.grad_buf(grads, v) {
                        add_into(d, gd);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    add_into(d, gd);
                }
                if let Some(d) = self.grad_buf(grads, *b) {
                    for (x, &y) in d.iter_mut().zip(gd) {
                        *x -= y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.grad_buf(grads, *a) {
                    for ((x, &gg), &y) in d.iter_mut().zip(gd).zip(vb) {
                        *x += gg * y;
                    }
                }
                if let Some(d) = self.grad_buf(grads, *b) {
                    for ((x, &gg), &y) in d.iter_mut().zip(gd).zip(va) {
                        *x += gg * y;
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(d) = self.grad_buf(grads, *x) {
                    add_into(d, gd);
                }
                if let Some(d) = self.grad_buf(grads, *bias) {
                    let f = d.len();
                    for row in gd.chunks(f) {
                        add_into(d, row);
                    }
                }
            }
            Op::MulCol(x, col) => {
                let vx = self.value(*x);
                let f = vx.cols();
                let vc = self.value(*col).data();
                if let Some(d) = self.grad_buf(grads, *x) {
                    for ((drow, grow), &s) in d.chunks_mut(f).zip(gd.chunks(f)).zip(vc) {
                        for (dd, &gg) in drow.iter_mut().zip(grow) {
                            *dd += gg * s;
                        }
                    }
                }
                if let Some(d) = self.grad_buf(grads, *col) {
                    for (r, (grow, xrow)) in gd.chunks(f).zip(vx.data().chunks(f)).enumerate() {
                        d[r] += dot(grow, xrow);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(d) = self.grad_buf(grads, *x) {
                    for (dd, &gg) in d.iter_mut().zip(gd) {
                        *dd += gg * *s;
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(d) = self.grad_buf(grads, *x) {
                    for ((dd, &gg), &y) in d.iter_mut().zip(gd).zip(out.data()) {
                        *dd += gg * y * (T::one() - y);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(d) = self.grad_buf(grads, *x) {
                    for ((dd, &gg), &y) in d.iter_mut().zip(gd).zip(out.data()) {
                        *dd += gg * (T::one() - y * y);
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(d) = self.grad_buf(grads, *x) {
                    for ((dd, &gg), &y) in d.iter_mut().zip(gd).zip(out.data()) {
                        if y > T::zero() {
                            *dd += gg;
                        }
                    }
                }
            }
            Op::Square(x) => {
                let vx = self.value(*x).data();
                if let Some(d) = self.grad_buf(grads, *x) {
                    for ((dd, &gg), &v) in d.iter_mut().zip(gd).zip(vx) {
                        *dd += gg * (v + v);
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let f = out.cols();
                if let Some(d) = self.grad_buf(grads, *x) {
                    for ((drow, grow), yrow) in
                        d.chunks_mut(f).zip(gd.chunks(f)).zip(out.data().chunks(f))
                    {
                        let inner = dot(grow, yrow);
                        for ((dd, &gg), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dd += y * (gg - inner);
                        }
                    }
                }
            }
            Op::LogFloor(x, floor) => {
                let vx = self.value(*x).data();
                if let Some(d) = self.grad_buf(grads, *x) {
                    for ((dd, &gg), &v) in d.iter_mut().zip(gd).zip(vx) {
                        if v > *floor {
                            *dd += gg / v;
                        }
                    }
                }
            }
            Op::Gather(table, idx) => {
                let dim = out.cols();
                if let Some(d) = self.grad_buf(grads, *table) {
                    for (r, &row) in idx.iter().enumerate() {
                        add_into(&mut d[row * dim..(row + 1) * dim], &gd[r * dim..(r + 1) * dim]);
                    }
                }
            }
            Op::Concat(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(d) = self.grad_buf(grads, p) {
                        for r in 0..rows {
                            add_into(
                                &mut d[r * w..(r + 1) * w],
                                &gd[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice(x, start) => {
                let len = out.cols();
                let f = self.value(*x).cols();
                if let Some(d) = self.grad_buf(grads, *x) {
                    for (r, grow) in gd.chunks(len).enumerate() {
                        add_into(&mut d[r * f + start..r * f + start + len], grow);
                    }
                }
            }
            Op::Stack(parts) => {
                let [b, k, f] = dims3(out.shape());
                for (ti, &p) in parts.iter().enumerate() {
                    if let Some(d) = self.grad_buf(grads, p) {
                        for bi in 0..b {
                            add_into(
                                &mut d[bi * f..(bi + 1) * f],
                                &gd[(bi * k + ti) * f..(bi * k + ti + 1) * f],
                            );
                        }
                    }
                }
            }
            Op::AttnScores(keys, query) => {
                let vk = self.value(*keys);
                let vq = self.value(*query);
                let [b, t, dim] = dims3(vk.shape());
                if let Some(d) = self.grad_buf(grads, *keys) {
                    for bi in 0..b {
                        let q = &vq.data()[bi * dim..(bi + 1) * dim];
                        for ti in 0..t {
                            let gg = gd[bi * t + ti];
                            let row = &mut d[(bi * t + ti) * dim..(bi * t + ti + 1) * dim];
                            for (dd, &qq) in row.iter_mut().zip(q) {
                                *dd += gg * qq;
                            }
                        }
                    }
                }
                if let Some(d) = self.grad_buf(grads, *query) {
                    for bi in 0..b {
                        let row = &mut d[bi * dim..(bi + 1) * dim];
                        for ti in 0..t {
                            let gg = gd[bi * t + ti];
                            let k = &vk.data()[(bi * t + ti) * dim..(bi * t + ti + 1) * dim];
                            for (dd, &kk) in row.iter_mut().zip(k) {
                                *dd += gg * kk;
                            }
                        }
                    }
                }
            }
            Op::AttnContext(weights, keys) => {
                let vw = self.value(*weights);
                let vk = self.value(*keys);
                let [b, t, dim] = dims3(vk.shape());
                if let Some(d) = self.grad_buf(grads, *weights) {
                    for bi in 0..b {
                        let grow = &gd[bi * dim..(bi + 1) * dim];
                        for ti in 0..t {
                            let k = &vk.data()[(bi * t + ti) * dim..(bi * t + ti + 1) * dim];
                            d[bi * t + ti] += dot(grow, k);
                        }
                    }
                }
                if let Some(d) = self.grad_buf(grads, *keys) {
                    for bi in 0..b {
                        let grow = &gd[bi * dim..(bi + 1) * dim];
                        for ti in 0..t {
                            let w = vw.data()[bi * t + ti];
                            let row = &mut d[(bi * t + ti) * dim..(bi * t + ti + 1) * dim];
                            for (dd, &gg) in row.iter_mut().zip(grow) {
                                *dd += w * gg;
                            }
                        }
                    }
                }
            }
            Op::Conv1d(x, filters, kernel) => {
                let vx = self.value(*x);
                let vf = self.value(*filters);
                let [b, w, c] = dims3(vx.shape());
                let f = vf.cols();
                let kc = kernel * c;
                let x_needs = self.nodes[x.0].needs_grad;
                let f_needs = self.nodes[filters.0].needs_grad;
                if f_needs {
                    let cols = im2col(vx.data(), b, w, c, *kernel);
                    let d = self.grad_buf(grads, *filters).expect("filter grad");
                    T::gemm(kc, b * w, f, &cols, true, gd, false, d, true);
                }
                if x_needs {
                    let mut dcols = vec![T::zero(); b * w * kc];
                    T::gemm(b * w, f, kc, gd, false, vf.data(), true, &mut dcols, false);
                    let d = self.grad_buf(grads, *x).expect("input grad");
                    col2im(&dcols, d, b, w, c, *kernel);
                }
            }
            Op::MaxTime(x, arg) => {
                let [_, w, f] = dims3(self.shape(*x));
                if let Some(d) = self.grad_buf(grads, *x) {
                    for (j, (&gg, &t)) in gd.iter().zip(arg).enumerate() {
                        let (bi, fi) = (j / f, j % f);
                        d[(bi * w + t) * f + fi] += gg;
                    }
                }
            }
            Op::TimeSum(x, weights) => {
                let [b, w, f] = dims3(self.shape(*x));
                if let Some(d) = self.grad_buf(grads, *x) {
                    for bi in 0..b {
                        let grow = &gd[bi * f..(bi + 1) * f];
                        for t in 0..w {
                            let wt = weights[bi * w + t];
                            let row = &mut d[(bi * w + t) * f..(bi * w + t + 1) * f];
                            for (dd, &gg) in row.iter_mut().zip(grow) {
                                *dd += wt * gg;
                            }
                        }
                    }
                }
            }
            Op::Pick(x, idx) => {
                let v = self.value(*x).cols();
                if let Some(d) = self.grad_buf(grads, *x) {
                    for (r, (&gg, &i)) in gd.iter().zip(idx).enumerate() {
                        d[r * v + i] += gg;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.grad_buf(grads, *x) {
                    for dd in d.iter_mut() {
                        *dd += gd[0];
                    }
                }
            }
            Op::Dot(x, weights) => {
                if let Some(d) = self.grad_buf(grads, *x) {
                    for (dd, &w) in d.iter_mut().zip(weights) {
                        *dd += gd[0] * w;
                    }
                }
            }
        }
    }
}

fn dims3(shape: &[usize]) -> [usize; 3] {
    assert_eq!(shape.len(), 3, "expected a [B, T, F] tensor, got {shape:?}");
    [shape[0], shape[1], shape[2]]
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable softmax of one row, in place.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}
