use std::cell::{Ref, RefCell};
use std::sync::Arc;

use super::ops::{
    axis_split, broadcast_shape, check_axis, for_each_broadcast, gemm, sigmoid,
};
use super::{ParamId, ParamStore, Result, Tensor, TensorError, LOG_FLOOR};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Concat(Vec<Var>, usize),
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    Reshape(Var),
    L2Normalize(Var, usize),
    Dot(Var, Var),
    Cosine(Var, Var),
    GatherRows(Var, Arc<[usize]>),
    ScatterAddRows(Var, Arc<[usize]>),
    SegmentSoftmax(Var, Arc<[usize]>),
    SliceRows(Var, usize),
    Take(Var, Arc<[usize]>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Dot(a, b) | Cosine(a, b) => {
                vec![*a, *b]
            }
            Concat(vs, _) => vs.clone(),
            Transpose(a)
            | Scale(a, _)
            | Relu(a)
            | LeakyRelu(a, _)
            | Sigmoid(a)
            | Exp(a)
            | Log(a)
            | Softmax(a, _)
            | LogSoftmax(a, _)
            | Sum(a, _)
            | Mean(a, _)
            | SumAll(a)
            | Reshape(a)
            | L2Normalize(a, _)
            | GatherRows(a, _)
            | ScatterAddRows(a, _)
            | SegmentSoftmax(a, _)
            | SliceRows(a, _)
            | Take(a, _) => vec![*a],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Ordered record of executed operations.
///
/// Ops append to the tape in execution order, so inputs always precede the
/// ops that consume them. Ops on untracked inputs are stored as constants.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bindings: RefCell<Vec<Option<Var>>>,
    bound: RefCell<Vec<(ParamId, Var)>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            bindings: RefCell::new(Vec::new()),
            bound: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing on it is differentiable.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Records `tensor` as an input; it is differentiable when
    /// `tensor.requires_grad()` is set.
    pub fn leaf(&self, tensor: Tensor) -> Result<Var> {
        let tracked = tensor.requires_grad() && self.grad_enabled;
        self.push_leaf(tensor, tracked)
    }

    pub fn constant(&self, tensor: Tensor) -> Result<Var> {
        self.push_leaf(tensor, false)
    }

    /// Binds a stored parameter; repeated calls return the same handle.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.bindings.borrow().get(id.0) {
            return *v;
        }
        let t = store.get(id);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        let var = self
            .push_leaf(value, self.grad_enabled)
            .expect("parameters must be finite");
        let mut b = self.bindings.borrow_mut();
        if b.len() <= id.0 {
            b.resize(id.0 + 1, None);
        }
        b[id.0] = Some(var);
        self.bound.borrow_mut().push((id, var));
        var
    }

    fn push_leaf(&self, mut tensor: Tensor, tracked: bool) -> Result<Var> {
        if !tensor.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        tensor.clear_grad();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            tracked,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn push(&self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if !super::all_finite(&data) {
            return Err(TensorError::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let tracked = self.grad_enabled && op.inputs().iter().any(|v| nodes[v.0].tracked);
        nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op: if tracked { op } else { Op::Leaf },
            tracked,
        });
        Ok(Var(nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn data(&self, v: Var) -> Vec<f64> {
        self.value(v).data().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let t = self.value(v);
        Tensor::from_parts(t.shape().to_vec(), t.data().to_vec())
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].tracked
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
        if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: x.shape().to_vec(),
                right: y.shape().to_vec(),
            });
        }
        let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, x.data(), (k as isize, 1), y.data(), (n as isize, 1), 0.0, &mut out);
        drop(nodes);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                left: x.shape().to_vec(),
                right: vec![],
            });
        }
        let (m, n) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x.data()[i * n + j];
            }
        }
        drop(x);
        self.push("transpose", vec![n, m], out, Op::Transpose(a))
    }

    // ---- broadcasting elementwise ----------------------------------------

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
        let (shape, out) = if x.shape() == y.shape() {
            let out = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
            (x.shape().to_vec(), out)
        } else {
            let shape = broadcast_shape(name, x.shape(), y.shape())?;
            let mut out = vec![0.0; shape.iter().product()];
            let (xd, yd) = (x.data(), y.data());
            for_each_broadcast(&shape, x.shape(), y.shape(), |o, i, j| {
                out[o] = f(xd[i], yd[j]);
            });
            (shape, out)
        };
        drop(nodes);
        self.push(name, shape, out, op)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    // ---- unary -----------------------------------------------------------

    fn unary(&self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let out = x.data().iter().map(|v| f(*v)).collect();
        drop(x);
        self.push(name, shape, out, op)
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Result<Var> {
        self.unary(
            "leaky_relu",
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    /// Natural log of `max(x, LOG_FLOOR)`.
    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary("log", a, |x| x.max(LOG_FLOOR).ln(), Op::Log(a))
    }

    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        check_axis("softmax", x.shape(), axis)?;
        let shape = x.shape().to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = x.data().to_vec();
        drop(x);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| out[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (out[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        self.push("softmax", shape, out, Op::Softmax(a, axis))
    }

    pub fn log_softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        check_axis("log_softmax", x.shape(), axis)?;
        let shape = x.shape().to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = x.data().to_vec();
        drop(x);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| out[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|j| (out[at(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    out[at(j)] -= lse;
                }
            }
        }
        self.push("log_softmax", shape, out, Op::LogSoftmax(a, axis))
    }

    // ---- shape / reductions ----------------------------------------------

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let first = nodes[parts.first().ok_or(TensorError::Domain {
            op: "concat",
            reason: "no inputs".into(),
        })?
        .0]
            .value
            .shape()
            .to_vec();
        check_axis("concat", &first, axis)?;
        let mut shape = first.clone();
        shape[axis] = 0;
        for p in parts {
            let s = nodes[p.0].value.shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: first,
                    right: s.to_vec(),
                });
            }
            shape[axis] += s[axis];
        }
        let (outer, total, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for p in parts {
            let t = &nodes[p.0].value;
            let len = t.shape()[axis];
            for o in 0..outer {
                let src = &t.data()[o * len * inner..(o + 1) * len * inner];
                let dst = (o * total + offset) * inner;
                out[dst..dst + len * inner].copy_from_slice(src);
            }
            offset += len;
        }
        drop(nodes);
        self.push("concat", shape, out, Op::Concat(parts.to_vec(), axis))
    }

    fn reduce(&self, name: &'static str, a: Var, axis: usize, mean: bool, op: Op) -> Result<Var> {
        let x = self.value(a);
        check_axis(name, x.shape(), axis)?;
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &x.data()[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        drop(x);
        self.push(name, shape, out, op)
    }

    /// Sum along `axis`, dropping it.
    pub fn sum(&self, a: Var, axis: usize) -> Result<Var> {
        self.reduce("sum", a, axis, false, Op::Sum(a, axis))
    }

    /// Mean along `axis`, dropping it.
    pub fn mean(&self, a: Var, axis: usize) -> Result<Var> {
        self.reduce("mean", a, axis, true, Op::Mean(a, axis))
    }

    pub fn sum_all(&self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum_all", vec![], vec![s], Op::SumAll(a))
    }

    pub fn mean_all(&self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let x = self.value(a);
        if shape.iter().product::<usize>() != x.len() || shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: x.shape().to_vec(),
                right: shape,
            });
        }
        let out = x.data().to_vec();
        drop(x);
        self.push("reshape", shape, out, Op::Reshape(a))
    }

    /// Scales slices along `axis` to unit L2 norm. Slices with norm below
    /// `LOG_FLOOR` are divided by the floor instead.
    pub fn l2_normalize(&self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        check_axis("l2_normalize", x.shape(), axis)?;
        let shape = x.shape().to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = x.data().to_vec();
        drop(x);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let norm = (0..len).map(|j| out[at(j)].powi(2)).sum::<f64>().sqrt();
                let norm = norm.max(LOG_FLOOR);
                for j in 0..len {
                    out[at(j)] /= norm;
                }
            }
        }
        self.push("l2_normalize", shape, out, Op::L2Normalize(a, axis))
    }

    pub fn dot(&self, a: Var, b: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
        if x.len() != y.len() {
            return Err(TensorError::ShapeMismatch {
                op: "dot",
                left: x.shape().to_vec(),
                right: y.shape().to_vec(),
            });
        }
        let s = x.data().iter().zip(y.data()).map(|(p, q)| p * q).sum();
        drop(nodes);
        self.push("dot", vec![], vec![s], Op::Dot(a, b))
    }

    pub fn cosine(&self, a: Var, b: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
        if x.len() != y.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cosine",
                left: x.shape().to_vec(),
                right: y.shape().to_vec(),
            });
        }
        let na = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = y.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(TensorError::Domain {
                op: "cosine",
                reason: "zero-norm input".into(),
            });
        }
        let s = x.data().iter().zip(y.data()).map(|(p, q)| p * q).sum::<f64>() / (na * nb);
        drop(nodes);
        self.push("cosine", vec![], vec![s], Op::Cosine(a, b))
    }

    // ---- row indexing for graph batches ----------------------------------

    /// Selects rows of a `[n, ...]` tensor: `out[i] = a[idx[i]]`.
    pub fn gather_rows(&self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        let x = self.value(a);
        let (n, cols) = (x.rows(), x.cols());
        if idx.is_empty() {
            return Err(TensorError::Domain {
                op: "gather_rows",
                reason: "empty index".into(),
            });
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &r in idx.iter() {
            if r >= n {
                return Err(TensorError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: r,
                    extent: n,
                });
            }
            out.extend_from_slice(&x.data()[r * cols..(r + 1) * cols]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = idx.len();
        drop(x);
        self.push("gather_rows", shape, out, Op::GatherRows(a, idx))
    }

    /// Sums rows into `n_out` buckets: `out[idx[i]] += a[i]`.
    pub fn scatter_add_rows(&self, a: Var, idx: Arc<[usize]>, n_out: usize) -> Result<Var> {
        let x = self.value(a);
        let cols = x.cols();
        if idx.len() != x.rows() || n_out == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_add_rows",
                left: x.shape().to_vec(),
                right: vec![idx.len(), n_out],
            });
        }
        let mut out = vec![0.0; n_out * cols];
        for (i, &r) in idx.iter().enumerate() {
            if r >= n_out {
                return Err(TensorError::IndexOutOfBounds {
                    op: "scatter_add_rows",
                    index: r,
                    extent: n_out,
                });
            }
            let src = &x.data()[i * cols..(i + 1) * cols];
            for (d, s) in out[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                *d += s;
            }
        }
        let mut shape = x.shape().to_vec();
        shape[0] = n_out;
        drop(x);
        self.push("scatter_add_rows", shape, out, Op::ScatterAddRows(a, idx))
    }

    /// Softmax over the flat entries of `a`, taken separately within each
    /// group of entries sharing a segment id.
    pub fn segment_softmax(&self, a: Var, segments: Arc<[usize]>) -> Result<Var> {
        let x = self.value(a);
        if segments.len() != x.len() {
            return Err(TensorError::ShapeMismatch {
                op: "segment_softmax",
                left: x.shape().to_vec(),
                right: vec![segments.len()],
            });
        }
        let n_seg = segments.iter().max().map_or(0, |m| m + 1);
        let mut max = vec![f64::NEG_INFINITY; n_seg];
        for (v, &s) in x.data().iter().zip(segments.iter()) {
            max[s] = max[s].max(*v);
        }
        let mut out: Vec<f64> = x
            .data()
            .iter()
            .zip(segments.iter())
            .map(|(v, &s)| (v - max[s]).exp())
            .collect();
        let mut sum = vec![0.0; n_seg];
        for (e, &s) in out.iter().zip(segments.iter()) {
            sum[s] += e;
        }
        for (e, &s) in out.iter_mut().zip(segments.iter()) {
            *e /= sum[s];
        }
        let shape = x.shape().to_vec();
        drop(x);
        self.push("segment_softmax", shape, out, Op::SegmentSoftmax(a, segments))
    }

    /// Rows `start..end` of a `[n, ...]` tensor.
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start >= end || end > x.rows() {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice_rows",
                index: end,
                extent: x.rows(),
            });
        }
        let cols = x.cols();
        let out = x.data()[start * cols..end * cols].to_vec();
        let mut shape = x.shape().to_vec();
        shape[0] = end - start;
        drop(x);
        self.push("slice_rows", shape, out, Op::SliceRows(a, start))
    }

    /// Flat gather into a 1-D tensor: `out[i] = a.flat[idx[i]]`.
    pub fn take(&self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        let x = self.value(a);
        if idx.is_empty() {
            return Err(TensorError::Domain {
                op: "take",
                reason: "empty index".into(),
            });
        }
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx.iter() {
            out.push(*x.data().get(i).ok_or(TensorError::IndexOutOfBounds {
                op: "take",
                index: i,
                extent: x.len(),
            })?);
        }
        drop(x);
        self.push("take", vec![idx.len()], out, Op::Take(a, idx))
    }

    // ---- reverse pass ----------------------------------------------------

    /// Runs reverse-mode differentiation from a scalar `loss`, consuming the
    /// tape. Each recorded op is visited once, in reverse order.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.into_inner();
        if nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let lv = &nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if !nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            backprop(&nodes, i, &g, &mut grads);
        }
        let leaves = nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| if matches!(n.op, Op::Leaf) && n.tracked { g } else { None })
            .collect();
        Ok(Gradients {
            grads: leaves,
            bound: self.bound.into_inner(),
        })
    }

    /// [`Tape::backward`] followed by accumulation into `store`.
    pub fn backward_into(self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(store);
        Ok(grads)
    }
}

/// Gradients of tracked leaves after a reverse pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    bound: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of a tracked leaf; `None` if no path reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into the store's buffers. Bound parameters
    /// that received no gradient get an explicit zero contribution.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(pid, var) in &self.bound {
            let t = store.get_mut(pid);
            match self.get(var) {
                Some(g) => t.accumulate_grad(g),
                None => {
                    if t.grad().is_none() {
                        t.zero_grad();
                    }
                }
            }
        }
    }
}

fn grad_buf<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].tracked {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[i].value;
    let val = |v: &Var| &nodes[v.0].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (x, y) = (val(a), val(b));
            let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                // ga += g @ b^T
                gemm(m, n, k, g, (n as isize, 1), y.data(), (1, n as isize), 1.0, ga);
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                // gb += a^T @ g
                gemm(k, m, n, x.data(), (1, k as isize), g, (n as isize, 1), 1.0, gb);
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (out.shape()[1], out.shape()[0]);
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for r in 0..m {
                    for c in 0..n {
                        ga[r * n + c] += g[c * m + r];
                    }
                }
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let (xs, ys) = (val(a).shape().to_vec(), val(b).shape().to_vec());
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for_each_broadcast(out.shape(), &xs, &ys, |o, ia, _| ga[ia] += g[o]);
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                for_each_broadcast(out.shape(), &xs, &ys, |o, _, ib| gb[ib] += sign * g[o]);
            }
        }
        Op::Mul(a, b) => {
            let (x, y) = (val(a), val(b));
            let (xd, yd) = (x.data(), y.data());
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for_each_broadcast(out.shape(), x.shape(), y.shape(), |o, ia, ib| {
                    ga[ia] += g[o] * yd[ib]
                });
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                for_each_broadcast(out.shape(), x.shape(), y.shape(), |o, ia, ib| {
                    gb[ib] += g[o] * xd[ia]
                });
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
            }
        }
        Op::Relu(a) => {
            let x = val(a).data();
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for k in 0..g.len() {
                    if x[k] > 0.0 {
                        ga[k] += g[k];
                    }
                }
            }
        }
        Op::LeakyRelu(a, slope) => {
            let x = val(a).data();
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for k in 0..g.len() {
                    ga[k] += if x[k] > 0.0 { g[k] } else { slope * g[k] };
                }
            }
        }
        Op::Sigmoid(a) => {
            let y = out.data();
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for k in 0..g.len() {
                    ga[k] += g[k] * y[k] * (1.0 - y[k]);
                }
            }
        }
        Op::Exp(a) => {
            let y = out.data();
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for k in 0..g.len() {
                    ga[k] += g[k] * y[k];
                }
            }
        }
        Op::Log(a) => {
            let x = val(a).data();
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for k in 0..g.len() {
                    if x[k] > LOG_FLOOR {
                        ga[k] += g[k] / x[k];
                    }
                }
            }
        }
        Op::Softmax(a, axis) => {
            let y = out.data();
            let (outer, len, inner) = axis_split(out.shape(), *axis);
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + ii;
                        let dotp: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            ga[at(j)] += y[at(j)] * (g[at(j)] - dotp);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax(a, axis) => {
            let y = out.data();
            let (outer, len, inner) = axis_split(out.shape(), *axis);
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + ii;
                        let gsum: f64 = (0..len).map(|j| g[at(j)]).sum();
                        for j in 0..len {
                            ga[at(j)] += g[at(j)] - y[at(j)].exp() * gsum;
                        }
                    }
                }
            }
        }
        Op::Concat(parts, axis) => {
            let (outer, total, inner) = axis_split(out.shape(), *axis);
            let mut offset = 0;
            for p in parts {
                let len = val(p).shape()[*axis];
                if let Some(gp) = grad_buf(nodes, grads, *p) {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        for (d, s) in gp[o * len * inner..(o + 1) * len * inner]
                            .iter_mut()
                            .zip(&g[src..src + len * inner])
                        {
                            *d += s;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Sum(a, axis) | Op::Mean(a, axis) => {
            let (outer, len, inner) = axis_split(val(a).shape(), *axis);
            let c = if matches!(nodes[i].op, Op::Mean(..)) { 1.0 / len as f64 } else { 1.0 };
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for o in 0..outer {
                    for j in 0..len {
                        let row = &mut ga[(o * len + j) * inner..(o * len + j + 1) * inner];
                        for (d, s) in row.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d += c * s;
                        }
                    }
                }
            }
        }
        Op::SumAll(a) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
        Op::L2Normalize(a, axis) => {
            let x = val(a).data();
            let y = out.data();
            let (outer, len, inner) = axis_split(out.shape(), *axis);
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + ii;
                        let norm = (0..len).map(|j| x[at(j)].powi(2)).sum::<f64>().sqrt();
                        if norm > LOG_FLOOR {
                            let gy: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                ga[at(j)] += (g[at(j)] - y[at(j)] * gy) / norm;
                            }
                        } else {
                            for j in 0..len {
                                ga[at(j)] += g[at(j)] / LOG_FLOOR;
                            }
                        }
                    }
                }
            }
        }
        Op::Dot(a, b) => {
            let (xd, yd) = (val(a).data(), val(b).data());
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                ga.iter_mut().zip(yd).for_each(|(d, y)| *d += g[0] * y);
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                gb.iter_mut().zip(xd).for_each(|(d, x)| *d += g[0] * x);
            }
        }
        Op::Cosine(a, b) => {
            let (xd, yd) = (val(a).data(), val(b).data());
            let na = xd.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = yd.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cos = out.data()[0];
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for k in 0..ga.len() {
                    ga[k] += g[0] * (yd[k] / (na * nb) - cos * xd[k] / (na * na));
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                for k in 0..gb.len() {
                    gb[k] += g[0] * (xd[k] / (na * nb) - cos * yd[k] / (nb * nb));
                }
            }
        }
        Op::GatherRows(a, idx) => {
            let cols = out.cols();
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for (k, &r) in idx.iter().enumerate() {
                    for (d, s) in ga[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(&g[k * cols..(k + 1) * cols])
                    {
                        *d += s;
                    }
                }
            }
        }
        Op::ScatterAddRows(a, idx) => {
            let cols = out.cols();
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for (k, &r) in idx.iter().enumerate() {
                    for (d, s) in ga[k * cols..(k + 1) * cols]
                        .iter_mut()
                        .zip(&g[r * cols..(r + 1) * cols])
                    {
                        *d += s;
                    }
                }
            }
        }
        Op::SegmentSoftmax(a, segments) => {
            let y = out.data();
            let n_seg = segments.iter().max().map_or(0, |m| m + 1);
            let mut dots = vec![0.0; n_seg];
            for k in 0..y.len() {
                dots[segments[k]] += g[k] * y[k];
            }
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for k in 0..y.len() {
                    ga[k] += y[k] * (g[k] - dots[segments[k]]);
                }
            }
        }
        Op::SliceRows(a, start) => {
            let cols = out.cols();
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                let base = start * cols;
                for (d, s) in ga[base..base + g.len()].iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
        Op::Take(a, idx) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for (k, &j) in idx.iter().enumerate() {
                    ga[j] += g[k];
                }
            }
        }
    }
}
