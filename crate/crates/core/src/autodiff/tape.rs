//! Reverse-mode tape.
//!
//! Every primitive evaluates its forward value eagerly and appends a node.
//! Node order is the recording order, which is already topological, so the
//! backward pass is a single reverse sweep.

use std::rc::Rc;

use super::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, reduce_to, split_axis, Float, Tensor};
use crate::error::{Error, Result};

/// SELU scale.
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
/// SELU negative-branch saturation.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extreme {
    Min,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Pow(Var, f64),
    Relu(Var),
    Selu(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    BroadcastTo(Var),
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    Max(Var, Vec<usize>),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather(Var, Rc<[usize]>),
    SegmentSum(Var, Rc<[usize]>),
    SegmentExtreme(Var, Vec<Option<usize>>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Single-owner recording of a computation.
pub struct Tape<T: Float = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Allows another backward pass over the recorded graph.
    pub fn reset(&mut self) {
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(T::of(value)))
    }

    // ---- elementwise binary ------------------------------------------------

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(ta.shape(), data);
        }
        let out = broadcast_shape(op, ta.shape(), tb.shape())?;
        let sa = broadcast_strides(ta.shape(), &out);
        let sb = broadcast_strides(tb.shape(), &out);
        let mut data = vec![T::zero(); out.iter().product()];
        let (da, db) = (ta.data(), tb.data());
        for_each_broadcast(&out, &sa, &sb, |i, ia, ib| data[i] = f(da[ia], db[ib]));
        Tensor::new(&out, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(i) = self.nodes[b.0].value.data().iter().position(|v| v.is_zero()) {
            return Err(Error::domain("div", format!("zero denominator at element {i}")));
        }
        let v = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b), &[a, b]))
    }

    // ---- elementwise unary -------------------------------------------------

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        self.nodes[a.0].value.map(f)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.unary(a, |x| -x);
        self.push(v, Op::Neg(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let k = T::of(c);
        let v = self.unary(a, |x| x * k);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let k = T::of(c);
        let v = self.unary(a, |x| x + k);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.unary(a, T::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(i) = self.nodes[a.0].value.data().iter().position(|&v| !(v > T::zero())) {
            return Err(Error::domain("log", format!("non-positive argument at element {i}")));
        }
        let v = self.unary(a, T::ln);
        Ok(self.push(v, Op::Log(a), &[a]))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let integral = p.fract() == 0.0;
        let bad = self.nodes[a.0].value.data().iter().position(|&v| {
            (v < T::zero() && !integral) || (v.is_zero() && p < 0.0)
        });
        if let Some(i) = bad {
            return Err(Error::domain("pow", format!("exponent {p} undefined at element {i}")));
        }
        let e = T::of(p);
        let v = self.unary(a, |x| x.powf(e));
        Ok(self.push(v, Op::Pow(a, p), &[a]))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.powf(a, 0.5)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.unary(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn selu(&mut self, a: Var) -> Var {
        let v = self.unary(a, selu);
        self.push(v, Op::Selu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.unary(a, |x| T::one() / (T::one() + (-x).exp()));
        self.push(v, Op::Sigmoid(a), &[a])
    }

    // ---- linear algebra ----------------------------------------------------

    /// `[m,k]·[k,n]`, `[B,m,k]·[B,k,n]` or `[B,m,k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        let mismatch = || Error::shape("matmul", format!("{sa:?} x {sb:?}"));
        let out = match (sa.len(), sb.len()) {
            (2, 2) | (3, 2) => {
                let k = sa[sa.len() - 1];
                if sb[0] != k {
                    return Err(mismatch());
                }
                let m: usize = sa[..sa.len() - 1].iter().product();
                let n = sb[1];
                let mut c = vec![T::zero(); m * n];
                T::gemm(m, k, n, ta.data(), k as isize, 1, tb.data(), n as isize, 1, T::zero(), &mut c, n as isize, 1);
                let mut shape = sa[..sa.len() - 1].to_vec();
                shape.push(n);
                Tensor::new(&shape, c)?
            }
            (3, 3) => {
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                if sb[0] != bs || sb[1] != k {
                    return Err(mismatch());
                }
                let n = sb[2];
                let mut c = vec![T::zero(); bs * m * n];
                for i in 0..bs {
                    T::gemm(
                        m,
                        k,
                        n,
                        &ta.data()[i * m * k..],
                        k as isize,
                        1,
                        &tb.data()[i * k * n..],
                        n as isize,
                        1,
                        T::zero(),
                        &mut c[i * m * n..],
                        n as isize,
                        1,
                    );
                }
                Tensor::new(&[bs, m, n], c)?
            }
            _ => return Err(mismatch()),
        };
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.rank() < 2 {
            return Err(Error::shape("transpose", format!("rank {} < 2", t.rank())));
        }
        let out = transpose_last(t);
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[a.0].value.reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let out_shape = broadcast_shape("broadcast_to", t.shape(), shape)?;
        if out_shape != shape {
            return Err(Error::shape("broadcast_to", format!("{:?} -> {shape:?}", t.shape())));
        }
        let sa = broadcast_strides(t.shape(), shape);
        let zero = vec![0; shape.len()];
        let mut data = vec![T::zero(); shape.iter().product()];
        for_each_broadcast(shape, &sa, &zero, |i, ia, _| data[i] = t.data()[ia]);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::BroadcastTo(a), &[a]))
    }

    // ---- reductions ----------------------------------------------------------

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        let r = self.nodes[a.0].value.rank();
        if axis >= r {
            return Err(Error::shape(op, format!("axis {axis} out of range for rank {r}")));
        }
        Ok(())
    }

    fn reduce_sum(t: &Tensor<T>, axis: Option<usize>) -> Tensor<T> {
        match axis {
            None => Tensor::scalar(t.data().iter().fold(T::zero(), |acc, &v| acc + v)),
            Some(ax) => {
                let (outer, len, inner) = split_axis(t.shape(), ax);
                let mut out = vec![T::zero(); outer * inner];
                let d = t.data();
                for o in 0..outer {
                    for j in 0..len {
                        let base = (o * len + j) * inner;
                        let dst = &mut out[o * inner..(o + 1) * inner];
                        for (x, &y) in dst.iter_mut().zip(&d[base..base + inner]) {
                            *x = *x + y;
                        }
                    }
                }
                let mut shape = t.shape().to_vec();
                shape[ax] = 1;
                Tensor::new(&shape, out).expect("reduced shape")
            }
        }
    }

    /// Sum over `axis` (kept as a singleton) or over everything.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        if let Some(ax) = axis {
            self.check_axis("sum", a, ax)?;
        }
        let out = Self::reduce_sum(&self.nodes[a.0].value, axis);
        Ok(self.push(out, Op::Sum(a, axis), &[a]))
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        if let Some(ax) = axis {
            self.check_axis("mean", a, ax)?;
        }
        let t = &self.nodes[a.0].value;
        let count = match axis {
            Some(ax) => t.shape()[ax],
            None => t.len(),
        };
        if count == 0 {
            return Err(Error::shape("mean", "empty reduction"));
        }
        let inv = T::of(1.0 / count as f64);
        let out = Self::reduce_sum(t, axis).map(|v| v * inv);
        Ok(self.push(out, Op::Mean(a, axis), &[a]))
    }

    /// Maximum over `axis` (kept as a singleton); the first maximal element
    /// receives the gradient.
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("max", a, axis)?;
        let t = &self.nodes[a.0].value;
        let (outer, len, inner) = split_axis(t.shape(), axis);
        if len == 0 {
            return Err(Error::shape("max", "empty reduction"));
        }
        let d = t.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for j in 1..len {
                    let idx = (o * len + j) * inner + i;
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                out.push(d[best]);
                arg.push(best);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::Max(a, arg), &[a]))
    }

    // ---- normalisers ---------------------------------------------------------

    fn last_axis_rows(t: &Tensor<T>) -> Result<(usize, usize)> {
        let c = *t.shape().last().ok_or_else(|| Error::shape("softmax", "rank-0 input"))?;
        if c == 0 {
            return Err(Error::shape("softmax", "empty last axis"));
        }
        Ok((t.len() / c, c))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (rows, c) = Self::last_axis_rows(t)?;
        let mut out = t.data().to_vec();
        for r in 0..rows {
            softmax_in_place(&mut out[r * c..(r + 1) * c]);
        }
        let out = Tensor::new(t.shape(), out)?;
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (rows, c) = Self::last_axis_rows(t)?;
        let mut out = t.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * c..(r + 1) * c];
            let m = row.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
            let lse = m + row.iter().map(|&v| (v - m).exp()).fold(T::zero(), |acc, v| acc + v).ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        Ok(self.push(out, Op::LogSoftmax(a), &[a]))
    }

    // ---- structural ----------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.nodes[first.0].value.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            let same = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !same {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = &self.nodes[p.0].value;
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis("slice", a, axis)?;
        let t = &self.nodes[a.0].value;
        let (outer, len, inner) = split_axis(t.shape(), axis);
        if start > end || end > len {
            return Err(Error::shape("slice", format!("{start}..{end} outside 0..{len}")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let b = (o * len + start) * inner;
            data.extend_from_slice(&t.data()[b..b + w * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = w;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Slice { x: a, axis, start }, &[a]))
    }

    /// Rows of `a` (axis 0) picked by `idx`; repeats allowed.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.rank() == 0 {
            return Err(Error::shape("gather", "rank-0 input"));
        }
        let n = t.shape()[0];
        let row: usize = t.shape()[1..].iter().product();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather", format!("index {bad} out of range 0..{n}")));
        }
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Gather(a, idx.into()), &[a]))
    }

    fn check_segments(&self, op: &'static str, a: Var, ids: &[usize], segments: usize) -> Result<usize> {
        let t = &self.nodes[a.0].value;
        if t.rank() != 2 || t.shape()[0] != ids.len() {
            return Err(Error::shape(op, format!("{:?} rows vs {} ids", t.shape(), ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&s| s >= segments) {
            return Err(Error::shape(op, format!("segment {bad} out of range 0..{segments}")));
        }
        Ok(t.shape()[1])
    }

    /// Sums rows of `a` into `segments` buckets; empty buckets are zero.
    pub fn segment_sum(&mut self, a: Var, ids: &[usize], segments: usize) -> Result<Var> {
        let d = self.check_segments("segment_sum", a, ids, segments)?;
        let t = &self.nodes[a.0].value;
        let mut out = vec![T::zero(); segments * d];
        for (r, &s) in ids.iter().enumerate() {
            for j in 0..d {
                out[s * d + j] = out[s * d + j] + t.data()[r * d + j];
            }
        }
        let out = Tensor::new(&[segments, d], out)?;
        Ok(self.push(out, Op::SegmentSum(a, ids.into()), &[a]))
    }

    /// Per-bucket elementwise min or max; empty buckets are zero.
    pub fn segment_extreme(&mut self, a: Var, ids: &[usize], segments: usize, which: Extreme) -> Result<Var> {
        let d = self.check_segments("segment_extreme", a, ids, segments)?;
        let t = &self.nodes[a.0].value;
        let mut winner: Vec<Option<usize>> = vec![None; segments * d];
        for (r, &s) in ids.iter().enumerate() {
            for j in 0..d {
                let src = r * d + j;
                let slot = &mut winner[s * d + j];
                let better = match *slot {
                    None => true,
                    Some(w) => match which {
                        Extreme::Max => t.data()[src] > t.data()[w],
                        Extreme::Min => t.data()[src] < t.data()[w],
                    },
                };
                if better {
                    *slot = Some(src);
                }
            }
        }
        let data = winner.iter().map(|w| w.map_or(T::zero(), |i| t.data()[i])).collect();
        let out = Tensor::new(&[segments, d], data)?;
        Ok(self.push(out, Op::SegmentExtreme(a, winner), &[a]))
    }

    // ---- backward --------------------------------------------------------------

    /// Propagates d(loss)/d(.) to every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Backward("empty tape".into()));
        }
        if self.consumed {
            return Err(Error::Backward("backward already ran on this tape; call reset() first".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    leaf_grads[i] = Some(Tensor::new(node.value.shape(), g)?);
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
        }
        Ok(Gradients {
            grads: leaf_grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a = *a + c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let out_shape = node.value.shape();
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, reduce_to(g, out_shape, val(*a).shape()));
                self.accumulate(grads, *b, reduce_to(g, out_shape, val(*b).shape()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, reduce_to(g, out_shape, val(*a).shape()));
                let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                self.accumulate(grads, *b, reduce_to(&neg, out_shape, val(*b).shape()));
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let sa = broadcast_strides(ta.shape(), out_shape);
                let sb = broadcast_strides(tb.shape(), out_shape);
                let mut ga = vec![T::zero(); ta.len()];
                let mut gb = vec![T::zero(); tb.len()];
                let is_div = matches!(node.op, Op::Div(..));
                let (da, db) = (ta.data(), tb.data());
                for_each_broadcast(out_shape, &sa, &sb, |k, ia, ib| {
                    if is_div {
                        ga[ia] = ga[ia] + g[k] / db[ib];
                        gb[ib] = gb[ib] - g[k] * da[ia] / (db[ib] * db[ib]);
                    } else {
                        ga[ia] = ga[ia] + g[k] * db[ib];
                        gb[ib] = gb[ib] + g[k] * da[ia];
                    }
                });
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.iter().map(|&x| -x).collect()),
            Op::Scale(a, c) => {
                let k = T::of(*c);
                self.accumulate(grads, *a, g.iter().map(|&x| x * k).collect());
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Exp(a) => self.accumulate(grads, *a, g.iter().zip(out).map(|(&x, &y)| x * y).collect()),
            Op::Log(a) => {
                let x = val(*a).data();
                self.accumulate(grads, *a, g.iter().zip(x).map(|(&gg, &xx)| gg / xx).collect());
            }
            Op::Pow(a, p) => {
                let x = val(*a).data();
                let (pe, pm1) = (T::of(*p), T::of(*p - 1.0));
                self.accumulate(grads, *a, g.iter().zip(x).map(|(&gg, &xx)| gg * pe * xx.powf(pm1)).collect());
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                self.accumulate(
                    grads,
                    *a,
                    g.iter().zip(x).map(|(&gg, &xx)| if xx > T::zero() { gg } else { T::zero() }).collect(),
                );
            }
            Op::Selu(a) => {
                let x = val(*a).data();
                let (l, la) = (T::of(SELU_LAMBDA), T::of(SELU_LAMBDA * SELU_ALPHA));
                self.accumulate(
                    grads,
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&gg, &xx)| if xx > T::zero() { gg * l } else { gg * la * xx.exp() })
                        .collect(),
                );
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, g.iter().zip(out).map(|(&gg, &y)| gg * y * (T::one() - y)).collect());
            }
            Op::MatMul(a, b) => self.backprop_matmul(*a, *b, g, grads),
            Op::Transpose(a) => {
                let gt = Tensor::new(out_shape, g.to_vec())?;
                self.accumulate(grads, *a, transpose_last(&gt).into_data());
            }
            Op::BroadcastTo(a) => self.accumulate(grads, *a, reduce_to(g, out_shape, val(*a).shape())),
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let shape = val(*a).shape();
                let mut contrib = reduce_target_broadcast(g, out_shape, shape);
                if matches!(node.op, Op::Mean(..)) {
                    let count = match axis {
                        Some(ax) => shape[*ax],
                        None => contrib.len(),
                    };
                    let inv = T::of(1.0 / count as f64);
                    contrib.iter_mut().for_each(|v| *v = *v * inv);
                }
                self.accumulate(grads, *a, contrib);
            }
            Op::Max(a, arg) => {
                let mut contrib = vec![T::zero(); val(*a).len()];
                for (k, &src) in arg.iter().enumerate() {
                    contrib[src] = contrib[src] + g[k];
                }
                self.accumulate(grads, *a, contrib);
            }
            Op::Softmax(a) => {
                let c = *out_shape.last().expect("softmax rank");
                let mut contrib = vec![T::zero(); out.len()];
                for r in 0..out.len() / c {
                    let (y, gy) = (&out[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                    let dot = y.iter().zip(gy).fold(T::zero(), |acc, (&p, &q)| acc + p * q);
                    for j in 0..c {
                        contrib[r * c + j] = y[j] * (gy[j] - dot);
                    }
                }
                self.accumulate(grads, *a, contrib);
            }
            Op::LogSoftmax(a) => {
                let c = *out_shape.last().expect("log_softmax rank");
                let mut contrib = vec![T::zero(); out.len()];
                for r in 0..out.len() / c {
                    let (y, gy) = (&out[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                    let total = gy.iter().fold(T::zero(), |acc, &q| acc + q);
                    for j in 0..c {
                        contrib[r * c + j] = gy[j] - y[j].exp() * total;
                    }
                }
                self.accumulate(grads, *a, contrib);
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).shape()[*axis];
                    let mut contrib = Vec::with_capacity(outer * w * inner);
                    for o in 0..outer {
                        let b = (o * total + offset) * inner;
                        contrib.extend_from_slice(&g[b..b + w * inner]);
                    }
                    offset += w;
                    self.accumulate(grads, *p, contrib);
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = val(*x).shape();
                let (outer, len, inner) = split_axis(shape, *axis);
                let w = out_shape[*axis];
                let mut contrib = vec![T::zero(); val(*x).len()];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    contrib[dst..dst + w * inner].copy_from_slice(&g[o * w * inner..(o + 1) * w * inner]);
                }
                self.accumulate(grads, *x, contrib);
            }
            Op::Gather(a, idx) => {
                let row: usize = out_shape[1..].iter().product();
                let mut contrib = vec![T::zero(); val(*a).len()];
                for (k, &src) in idx.iter().enumerate() {
                    for j in 0..row {
                        contrib[src * row + j] = contrib[src * row + j] + g[k * row + j];
                    }
                }
                self.accumulate(grads, *a, contrib);
            }
            Op::SegmentSum(a, ids) => {
                let d = out_shape[1];
                let mut contrib = Vec::with_capacity(ids.len() * d);
                for &s in ids.iter() {
                    contrib.extend_from_slice(&g[s * d..(s + 1) * d]);
                }
                self.accumulate(grads, *a, contrib);
            }
            Op::SegmentExtreme(a, winner) => {
                let mut contrib = vec![T::zero(); val(*a).len()];
                for (k, w) in winner.iter().enumerate() {
                    if let Some(src) = w {
                        contrib[*src] = contrib[*src] + g[k];
                    }
                }
                self.accumulate(grads, *a, contrib);
            }
        }
        Ok(())
    }

    fn backprop_matmul(&self, a: Var, b: Var, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        let need_a = self.nodes[a.0].requires_grad;
        let need_b = self.nodes[b.0].requires_grad;
        if sb.len() == 2 {
            let k = sa[sa.len() - 1];
            let m = ta.len() / k;
            let n = sb[1];
            if need_a {
                // dA = G · Bᵀ
                let mut ga = vec![T::zero(); m * k];
                T::gemm(m, n, k, g, n as isize, 1, tb.data(), 1, n as isize, T::zero(), &mut ga, k as isize, 1);
                self.accumulate(grads, a, ga);
            }
            if need_b {
                // dB = Aᵀ · G
                let mut gb = vec![T::zero(); k * n];
                T::gemm(k, m, n, ta.data(), 1, k as isize, g, n as isize, 1, T::zero(), &mut gb, n as isize, 1);
                self.accumulate(grads, b, gb);
            }
        } else {
            let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let mut ga = vec![T::zero(); if need_a { bs * m * k } else { 0 }];
            let mut gb = vec![T::zero(); if need_b { bs * k * n } else { 0 }];
            for i in 0..bs {
                let gi = &g[i * m * n..];
                if need_a {
                    T::gemm(m, n, k, gi, n as isize, 1, &tb.data()[i * k * n..], 1, n as isize, T::zero(), &mut ga[i * m * k..], k as isize, 1);
                }
                if need_b {
                    T::gemm(k, m, n, &ta.data()[i * m * k..], 1, k as isize, gi, n as isize, 1, T::zero(), &mut gb[i * k * n..], n as isize, 1);
                }
            }
            if need_a {
                self.accumulate(grads, a, ga);
            }
            if need_b {
                self.accumulate(grads, b, gb);
            }
        }
    }
}

/// Broadcasts a reduced gradient back over the reduced axes.
fn reduce_target_broadcast<T: Float>(g: &[T], reduced: &[usize], full: &[usize]) -> Vec<T> {
    if reduced.is_empty() {
        return vec![g[0]; full.iter().product()];
    }
    let sg = broadcast_strides(reduced, full);
    let zero = vec![0; full.len()];
    let mut out = vec![T::zero(); full.iter().product()];
    for_each_broadcast(full, &sg, &zero, |i, ig, _| out[i] = g[ig]);
    out
}

pub(crate) fn transpose_last<T: Float>(t: &Tensor<T>) -> Tensor<T> {
    let r = t.rank();
    let (m, n) = (t.shape()[r - 2], t.shape()[r - 1]);
    let batch = t.len() / (m * n).max(1);
    let mut data = vec![T::zero(); t.len()];
    for b in 0..batch {
        let src = &t.data()[b * m * n..(b + 1) * m * n];
        let dst = &mut data[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(&shape, data).expect("transpose shape")
}

pub fn selu<T: Float>(x: T) -> T {
    let l = T::of(SELU_LAMBDA);
    if x > T::zero() {
        l * x
    } else {
        l * T::of(SELU_ALPHA) * (x.exp() - T::one())
    }
}

pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}
