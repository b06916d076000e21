//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every primitive application in topological order
//! together with its forward value. [`Graph::backward`] walks the tape once in
//! reverse and returns the gradient of a scalar root for every parameter that
//! was bound into the graph. All reductions run sequentially in index order,
//! so identical graphs produce bit-identical values and gradients.

use std::collections::{BTreeMap, HashMap};

use crate::error::TensorError;
use crate::tensor::{axis_split, gemm, numel, strides, Tensor};

type TResult<T> = Result<T, TensorError>;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors. Ids are dense indices in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    lookup: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name, which is a
    /// programming error in model construction.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Ids whose name starts with `prefix`.
    pub fn group(&self, prefix: &str) -> Vec<ParamId> {
        self.iter().filter(|(_, n, _)| n.starts_with(prefix)).map(|(id, _, _)| id).collect()
    }
}

/// Gradient of a scalar root with respect to every parameter bound in a graph.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.map.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Relu,
    Gelu,
    Sigmoid,
    Softplus,
    Recip,
    Square,
    Scale(f64),
    Shift(f64),
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "negate",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Relu => "relu",
            Unary::Gelu => "gelu",
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::Recip => "reciprocal",
            Unary::Square => "square",
            Unary::Scale(_) => "scale",
            Unary::Shift(_) => "shift",
        }
    }

    fn forward(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Relu => x.max(0.0),
            Unary::Gelu => 0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_A * x * x * x))),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Recip => 1.0 / x,
            Unary::Square => x * x,
            Unary::Scale(c) => c * x,
            Unary::Shift(c) => x + c,
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Gelu => {
                let t = fast_tanh(GELU_C * (x + GELU_A * x * x * x));
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Recip => -y * y,
            Unary::Square => 2.0 * x,
            Unary::Scale(c) => c,
            Unary::Shift(_) => 1.0,
        }
    }

    fn check(self, x: f64) -> Option<String> {
        match self {
            Unary::Log if x <= 0.0 || x.is_nan() => Some(format!("log of non-positive value {x}")),
            Unary::Recip if x == 0.0 => Some("reciprocal of zero".to_string()),
            _ => None,
        }
    }
}

// One `exp` instead of libm's `tanh`; GELU dominates the encoder's pointwise cost.
fn fast_tanh(y: f64) -> f64 {
    1.0 - 2.0 / (1.0 + (2.0 * y).exp())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable `log(sum(exp(v)))` in fixed order.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = v.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    Unary(Var, Unary),
    Add(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LogSumExp(Var, usize),
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    Embedding { table: Var, indices: Vec<usize> },
    Gather { input: Var, indices: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    LayerNorm { x: Var, scale: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Reshape(Var),
    Permute { input: Var, perm: Vec<usize> },
    Slice { input: Var, axis: usize, start: usize },
    StopGradient(Var),
    StraightThrough(Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    grad: bool,
}

/// Recording of primitive applications, in topological order.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    track_params: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph in which bound parameters receive gradients.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new(), track_params: true }
    }

    /// A graph that binds parameters as constants; nothing is differentiable.
    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new(), track_params: false }
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
        self.nodes[v.0].grad
    }

    /// The parameter a node was bound from, if it is a tracked parameter leaf.
    pub fn param_of(&self, v: Var) -> Option<ParamId> {
        match self.nodes[v.0].op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }

    /// Direct inputs of a node.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Constant | Op::Param(_) => Vec::new(),
            Op::Unary(x, _)
            | Op::Softmax(x, _)
            | Op::LogSoftmax(x, _)
            | Op::LogSumExp(x, _)
            | Op::Sum(x, _)
            | Op::Mean(x, _)
            | Op::SumAll(x)
            | Op::Reshape(x)
            | Op::StopGradient(x)
            | Op::StraightThrough(x) => vec![*x],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::Embedding { table, .. } => vec![*table],
            Op::Gather { input, .. } | Op::Permute { input, .. } | Op::Slice { input, .. } => vec![*input],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::LayerNorm { x, scale, bias, .. } => vec![*x, *scale, *bias],
        }
    }

    /// Handles of all recorded nodes in tape order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    fn push(&mut self, op: Op, value: Tensor, grad: bool) -> Var {
        self.nodes.push(Node { op, value, grad });
        Var(self.nodes.len() - 1)
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value, false)
    }

    /// Binds a parameter into the graph. Repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let value = store.get(id).clone();
        let v = if self.track_params {
            self.push(Op::Param(id), value, true)
        } else {
            self.push(Op::Constant, value, false)
        };
        self.bound.insert(id, v);
        v
    }

    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(Op::StopGradient(x), value, false)
    }

    /// Forward value `hard`, gradient passed unchanged to `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> TResult<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(TensorError::ShapeMismatch {
                op: "straight_through",
                lhs: self.shape(soft).to_vec(),
                rhs: hard.shape().to_vec(),
            });
        }
        let grad = self.g(soft);
        Ok(self.push(Op::StraightThrough(soft), hard, grad))
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> TResult<Var> {
        let input = self.value(x);
        if let Some(detail) = input.data().iter().find_map(|&v| kind.check(v)) {
            return Err(TensorError::Domain { op: kind.name(), detail });
        }
        let value = input.map(|v| kind.forward(v));
        let grad = self.g(x);
        Ok(self.push(Op::Unary(x, kind), value, grad))
    }

    pub fn neg(&mut self, x: Var) -> TResult<Var> {
        self.unary(x, Unary::Neg)
    }
    pub fn exp(&mut self, x: Var) -> TResult<Var> {
        self.unary(x, Unary::Exp)
    }
    pub fn log(&mut self, x: Var) -> TResult<Var> {
        self.unary(x, Unary::Log)
    }
    pub fn relu(&mut self, x: Var) -> TResult<Var> {
        self.unary(x, Unary::Relu)
    }
    /// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, x: Var) -> TResult<Var> {
        self.unary(x, Unary::Gelu)
    }
    pub fn sigmoid(&mut self, x: Var) -> TResult<Var> {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn softplus(&mut self, x: Var) -> TResult<Var> {
        self.unary(x, Unary::Softplus)
    }
    pub fn recip(&mut self, x: Var) -> TResult<Var> {
        self.unary(x, Unary::Recip)
    }
    pub fn square(&mut self, x: Var) -> TResult<Var> {
        self.unary(x, Unary::Square)
    }
    pub fn scale(&mut self, x: Var, c: f64) -> TResult<Var> {
        self.unary(x, Unary::Scale(c))
    }
    pub fn shift(&mut self, x: Var, c: f64) -> TResult<Var> {
        self.unary(x, Unary::Shift(c))
    }

    /// Elementwise `a + b`. `b` may equal `a`'s shape, a trailing suffix of it,
    /// or hold a single element.
    pub fn add(&mut self, a: Var, b: Var) -> TResult<Var> {
        let value = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        let grad = self.g(a) || self.g(b);
        Ok(self.push(Op::Add(a, b), value, grad))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TResult<Var> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    /// Elementwise `a * b` with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> TResult<Var> {
        let value = self.broadcast_binary("multiply", a, b, |x, y| x * y)?;
        let grad = self.g(a) || self.g(b);
        Ok(self.push(Op::Mul(a, b), value, grad))
    }

    fn broadcast_binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> TResult<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let nb = tb.numel();
        let ok = ta.shape() == tb.shape()
            || nb == 1
            || (tb.rank() <= ta.rank() && ta.shape().ends_with(tb.shape()) && nb > 0);
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let bd = tb.data();
        Ok(Tensor::new(ta.shape().to_vec(), broadcast_map(ta.data(), bd, f)).expect("shape preserved"))
    }

    /// `a[.., k] @ b[k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> TResult<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() < 1 || tb.rank() != 2 || ta.shape()[ta.rank() - 1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let k = tb.shape()[0];
        let n = tb.shape()[1];
        let m = ta.numel() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), k as isize, 1, tb.data(), n as isize, 1, &mut out, 0.0);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out).expect("matmul shape");
        let grad = self.g(a) || self.g(b);
        Ok(self.push(Op::MatMul(a, b), value, grad))
    }

    /// Batched `a[B, m, k] @ b[B, k, n]`, or `@ b[B, n, k]^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> TResult<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let err = || TensorError::ShapeMismatch {
            op: "batch_matmul",
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        };
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(err());
        }
        let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (kb, n) = if trans_b { (tb.shape()[2], tb.shape()[1]) } else { (tb.shape()[1], tb.shape()[2]) };
        if kb != k {
            return Err(err());
        }
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &ta.data()[i * m * k..],
                k as isize,
                1,
                &tb.data()[i * k * n..],
                rsb,
                csb,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let value = Tensor::new(vec![bs, m, n], out).expect("bmm shape");
        let grad = self.g(a) || self.g(b);
        Ok(self.push(Op::BatchMatMul { a, b, trans_b }, value, grad))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> TResult<()> {
        let rank = self.value(x).rank();
        if axis >= rank {
            return Err(TensorError::Axis { op, axis, rank });
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> TResult<Var> {
        self.check_axis("softmax", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut out = vec![0.0; t.numel()];
        for_each_lane(outer, len, inner, |idx| {
            let m = idx.clone().map(|i| t.data()[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for i in idx.clone() {
                let e = (t.data()[i] - m).exp();
                out[i] = e;
                s += e;
            }
            for i in idx {
                out[i] /= s;
            }
        });
        let value = Tensor::new(t.shape().to_vec(), out).expect("softmax shape");
        let grad = self.g(x);
        Ok(self.push(Op::Softmax(x, axis), value, grad))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> TResult<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut out = vec![0.0; t.numel()];
        for_each_lane(outer, len, inner, |idx| {
            let m = idx.clone().map(|i| t.data()[i]).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = idx.clone().map(|i| (t.data()[i] - m).exp()).sum();
            let lse = m + s.ln();
            for i in idx {
                out[i] = t.data()[i] - lse;
            }
        });
        let value = Tensor::new(t.shape().to_vec(), out).expect("log_softmax shape");
        let grad = self.g(x);
        Ok(self.push(Op::LogSoftmax(x, axis), value, grad))
    }

    pub fn logsumexp(&mut self, x: Var, axis: usize) -> TResult<Var> {
        self.check_axis("logsumexp", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let mut lane = Vec::with_capacity(len);
        for_each_lane(outer, len, inner, |idx| {
            lane.clear();
            lane.extend(idx.clone().map(|i| t.data()[i]));
            let first = idx.clone().next().unwrap_or(0);
            let o = first / (len * inner).max(1);
            let r = first % inner.max(1);
            out[o * inner + r] = log_sum_exp(&lane);
        });
        let value = Tensor::new(reduced_shape(t.shape(), axis), out).expect("logsumexp shape");
        let grad = self.g(x);
        Ok(self.push(Op::LogSumExp(x, axis), value, grad))
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> TResult<Var> {
        self.check_axis("sum", x, axis)?;
        let value = reduce_sum(self.value(x), axis, 1.0);
        let grad = self.g(x);
        Ok(self.push(Op::Sum(x, axis), value, grad))
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> TResult<Var> {
        self.check_axis("mean", x, axis)?;
        let len = self.value(x).shape()[axis];
        if len == 0 {
            return Err(TensorError::Domain { op: "mean", detail: "empty axis".into() });
        }
        let value = reduce_sum(self.value(x), axis, 1.0 / len as f64);
        let grad = self.g(x);
        Ok(self.push(Op::Mean(x, axis), value, grad))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let grad = self.g(x);
        self.push(Op::SumAll(x), Tensor::scalar(s), grad)
    }

    pub fn mean_all(&mut self, x: Var) -> TResult<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(TensorError::Domain { op: "mean", detail: "empty tensor".into() });
        }
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Rows of `table[V, H]` selected by `indices`; output shape `index_shape + [H]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize], index_shape: &[usize]) -> TResult<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embedding_lookup",
                lhs: t.shape().to_vec(),
                rhs: index_shape.to_vec(),
            });
        }
        if numel(index_shape) != indices.len() {
            return Err(TensorError::DataLength { shape: index_shape.to_vec(), len: indices.len() });
        }
        let (v, h) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * h);
        for &i in indices {
            if i >= v {
                return Err(TensorError::Index { op: "embedding_lookup", index: i, extent: v });
            }
            out.extend_from_slice(&t.data()[i * h..(i + 1) * h]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(h);
        let value = Tensor::new(shape, out).expect("embedding shape");
        let grad = self.g(table);
        Ok(self.push(Op::Embedding { table, indices: indices.to_vec() }, value, grad))
    }

    /// Picks one entry per lane of the last axis: `out[r] = x[r, indices[r]]`.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> TResult<Var> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(TensorError::Axis { op: "gather", axis: 0, rank: 0 });
        }
        let n = t.shape()[t.rank() - 1];
        let rows = t.numel() / n.max(1);
        if rows != indices.len() {
            return Err(TensorError::DataLength { shape: t.shape()[..t.rank() - 1].to_vec(), len: indices.len() });
        }
        let mut out = Vec::with_capacity(rows);
        for (r, &i) in indices.iter().enumerate() {
            if i >= n {
                return Err(TensorError::Index { op: "gather", index: i, extent: n });
            }
            out.push(t.data()[r * n + i]);
        }
        let value = Tensor::new(t.shape()[..t.rank() - 1].to_vec(), out).expect("gather shape");
        let grad = self.g(x);
        Ok(self.push(Op::Gather { input: x, indices: indices.to_vec() }, value, grad))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> TResult<Var> {
        let first = inputs.first().ok_or(TensorError::Domain { op: "concat", detail: "no inputs".into() })?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::Axis { op: "concat", axis, rank: base.len() });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: base, rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let w = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out).expect("concat shape");
        let grad = inputs.iter().any(|&v| self.g(v));
        Ok(self.push(Op::Concat { inputs: inputs.to_vec(), axis }, value, grad))
    }

    /// Normalizes over the last axis, then applies per-feature `scale` and `bias`.
    pub fn layer_norm(&mut self, x: Var, scale: Var, bias: Var) -> TResult<Var> {
        let t = self.value(x);
        let n = *t.shape().last().ok_or(TensorError::Axis { op: "layer_norm", axis: 0, rank: 0 })?;
        for p in [scale, bias] {
            if self.value(p).shape() != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: t.shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let (sc, bi) = (self.value(scale).data(), self.value(bias).data());
        let rows = t.numel() / n.max(1);
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let xh = (row[j] - mu) * rs;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * sc[j] + bi[j];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("layer_norm shape");
        let grad = self.g(x) || self.g(scale) || self.g(bias);
        Ok(self.push(Op::LayerNorm { x, scale, bias, xhat, rstd }, value, grad))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> TResult<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let grad = self.g(x);
        Ok(self.push(Op::Reshape(x), value, grad))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> TResult<Var> {
        let t = self.value(x);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::ShapeMismatch { op: "permute", lhs: t.shape().to_vec(), rhs: perm.to_vec() });
        }
        let value = permute_tensor(t, perm);
        let grad = self.g(x);
        Ok(self.push(Op::Permute { input: x, perm: perm.to_vec() }, value, grad))
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> TResult<Var> {
        self.check_axis("slice", x, axis)?;
        let t = self.value(x);
        let (outer, n, inner) = axis_split(t.shape(), axis);
        if start + len > n {
            return Err(TensorError::Index { op: "slice", index: start + len, extent: n });
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, out).expect("slice shape");
        let grad = self.g(x);
        Ok(self.push(Op::Slice { input: x, axis, start }, value, grad))
    }

    /// Reverse pass from a scalar `root`. Every parameter bound into this
    /// graph appears in the result; unreachable ones get zeros.
    pub fn backward(&self, root: Var) -> TResult<Gradients> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(TensorError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Param(_)) {
                grads[idx] = Some(g);
            }
        }
        let mut map = BTreeMap::new();
        for (&id, &v) in &self.bound {
            if !self.track_params {
                continue;
            }
            let g = grads
                .get(v.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
            map.insert(id, g);
        }
        Ok(Gradients { map })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.g(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Constant | Op::Param(_) | Op::StopGradient(_) => {}
            Op::StraightThrough(s) => acc(*s, g.clone()),
            Op::Reshape(x) => {
                let t = Tensor::new(self.value(*x).shape().to_vec(), g.data().to_vec()).expect("reshape grad");
                acc(*x, t)
            }
            Op::Unary(x, kind) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| gi * kind.derivative(xi, yi))
                    .collect();
                acc(*x, Tensor::new(xv.shape().to_vec(), data).expect("unary grad"));
            }
            Op::Add(a, b) => {
                if self.g(*a) {
                    acc(*a, g.clone());
                }
                if self.g(*b) {
                    acc(*b, reduce_broadcast(g.data(), self.value(*b).shape()));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.g(*a) {
                    let data = broadcast_map(g.data(), tb.data(), |gi, bi| gi * bi);
                    acc(*a, Tensor::new(ta.shape().to_vec(), data).expect("mul grad"));
                }
                if self.g(*b) {
                    let prod: Vec<f64> = g.data().iter().zip(ta.data()).map(|(gi, ai)| gi * ai).collect();
                    acc(*b, reduce_broadcast(&prod, tb.shape()));
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (k, n) = (tb.shape()[0], tb.shape()[1]);
                let m = ta.numel() / k.max(1);
                if self.g(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), n as isize, 1, tb.data(), 1, n as isize, &mut da, 0.0);
                    acc(*a, Tensor::new(ta.shape().to_vec(), da).expect("matmul grad a"));
                }
                if self.g(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), 1, k as isize, g.data(), n as isize, 1, &mut db, 0.0);
                    acc(*b, Tensor::new(vec![k, n], db).expect("matmul grad b"));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = node.value.shape()[2];
                if self.g(*a) {
                    let mut da = vec![0.0; bs * m * k];
                    let (rs, cs) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g.data()[i * m * n..],
                            n as isize,
                            1,
                            &tb.data()[i * k * n..],
                            rs,
                            cs,
                            &mut da[i * m * k..(i + 1) * m * k],
                            0.0,
                        );
                    }
                    acc(*a, Tensor::new(ta.shape().to_vec(), da).expect("bmm grad a"));
                }
                if self.g(*b) {
                    let mut db = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, &g.data()[i * m * n..], 1, n as isize, &ta.data()[i * m * k..], k as isize, 1, out, 0.0);
                        } else {
                            gemm(k, m, n, &ta.data()[i * m * k..], 1, k as isize, &g.data()[i * m * n..], n as isize, 1, out, 0.0);
                        }
                    }
                    acc(*b, Tensor::new(tb.shape().to_vec(), db).expect("bmm grad b"));
                }
            }
            Op::Softmax(x, axis) => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let mut dx = vec![0.0; y.numel()];
                for_each_lane(outer, len, inner, |idx| {
                    let dot: f64 = idx.clone().map(|i| g.data()[i] * y.data()[i]).sum();
                    for i in idx {
                        dx[i] = y.data()[i] * (g.data()[i] - dot);
                    }
                });
                acc(*x, Tensor::new(y.shape().to_vec(), dx).expect("softmax grad"));
            }
            Op::LogSoftmax(x, axis) => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let mut dx = vec![0.0; y.numel()];
                for_each_lane(outer, len, inner, |idx| {
                    let gs: f64 = idx.clone().map(|i| g.data()[i]).sum();
                    for i in idx {
                        dx[i] = g.data()[i] - y.data()[i].exp() * gs;
                    }
                });
                acc(*x, Tensor::new(y.shape().to_vec(), dx).expect("log_softmax grad"));
            }
            Op::LogSumExp(x, axis) => {
                let xv = self.value(*x);
                let (outer, len, inner) = axis_split(xv.shape(), *axis);
                let mut dx = vec![0.0; xv.numel()];
                for o in 0..outer {
                    for r in 0..inner {
                        let lse = node.value.data()[o * inner + r];
                        let go = g.data()[o * inner + r];
                        for j in 0..len {
                            let i = o * len * inner + j * inner + r;
                            dx[i] = go * (xv.data()[i] - lse).exp();
                        }
                    }
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), dx).expect("logsumexp grad"));
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                let xv = self.value(*x);
                let (outer, len, inner) = axis_split(xv.shape(), *axis);
                let c = if matches!(node.op, Op::Mean(..)) { 1.0 / len as f64 } else { 1.0 };
                let mut dx = vec![0.0; xv.numel()];
                for o in 0..outer {
                    for j in 0..len {
                        for r in 0..inner {
                            dx[o * len * inner + j * inner + r] = c * g.data()[o * inner + r];
                        }
                    }
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), dx).expect("sum grad"));
            }
            Op::SumAll(x) => {
                let gv = g.data()[0];
                acc(*x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::Embedding { table, indices } => {
                let tv = self.value(*table);
                let h = tv.shape()[1];
                let mut dt = Tensor::zeros(tv.shape());
                for (r, &i) in indices.iter().enumerate() {
                    let src = &g.data()[r * h..(r + 1) * h];
                    for (d, s) in dt.data_mut()[i * h..(i + 1) * h].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                acc(*table, dt);
            }
            Op::Gather { input, indices } => {
                let xv = self.value(*input);
                let n = xv.shape()[xv.rank() - 1];
                let mut dx = Tensor::zeros(xv.shape());
                for (r, &i) in indices.iter().enumerate() {
                    dx.data_mut()[r * n + i] += g.data()[r];
                }
                acc(*input, dx);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let vs = self.value(v).shape().to_vec();
                    let w = vs[*axis] * inner;
                    if self.g(v) {
                        let mut d = Vec::with_capacity(numel(&vs));
                        for o in 0..outer {
                            let base = o * total * inner + offset;
                            d.extend_from_slice(&g.data()[base..base + w]);
                        }
                        acc(v, Tensor::new(vs.clone(), d).expect("concat grad"));
                    }
                    offset += w;
                }
            }
            Op::LayerNorm { x, scale, bias, xhat, rstd } => {
                let xv = self.value(*x);
                let n = *xv.shape().last().unwrap();
                let rows = xv.numel() / n.max(1);
                let sc = self.value(*scale).data();
                if self.g(*bias) {
                    let mut db = vec![0.0; n];
                    for r in 0..rows {
                        for j in 0..n {
                            db[j] += g.data()[r * n + j];
                        }
                    }
                    acc(*bias, Tensor::from_vec(db));
                }
                if self.g(*scale) {
                    let mut ds = vec![0.0; n];
                    for r in 0..rows {
                        for j in 0..n {
                            ds[j] += g.data()[r * n + j] * xhat[r * n + j];
                        }
                    }
                    acc(*scale, Tensor::from_vec(ds));
                }
                if self.g(*x) {
                    let mut dx = vec![0.0; xv.numel()];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..n {
                            let dxh = g.data()[r * n + j] * sc[j];
                            m1 += dxh;
                            m2 += dxh * xhat[r * n + j];
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        for j in 0..n {
                            let dxh = g.data()[r * n + j] * sc[j];
                            dx[r * n + j] = rstd[r] * (dxh - m1 - xhat[r * n + j] * m2);
                        }
                    }
                    acc(*x, Tensor::new(xv.shape().to_vec(), dx).expect("layer_norm grad"));
                }
            }
            Op::Permute { input, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                acc(*input, permute_tensor(g, &inverse));
            }
            Op::Slice { input, axis, start } => {
                let xv = self.value(*input);
                let (outer, n, inner) = axis_split(xv.shape(), *axis);
                let len = node.value.shape()[*axis];
                let mut dx = Tensor::zeros(xv.shape());
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    dx.data_mut()[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*input, dx);
            }
        }
    }
}

fn for_each_lane(outer: usize, len: usize, inner: usize, mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>)) {
    for o in 0..outer {
        for r in 0..inner {
            let start = o * len * inner + r;
            f((start..start + len * inner).step_by(inner.max(1)));
        }
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

fn reduce_sum(t: &Tensor, axis: usize, c: f64) -> Tensor {
    let (outer, len, inner) = axis_split(t.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            for r in 0..inner {
                out[o * inner + r] += t.data()[o * len * inner + j * inner + r];
            }
        }
    }
    if c != 1.0 {
        out.iter_mut().for_each(|v| *v *= c);
    }
    Tensor::new(reduced_shape(t.shape(), axis), out).expect("reduce shape")
}

/// Sums a full-shape gradient down to a broadcast operand's shape.
fn reduce_broadcast(g: &[f64], shape: &[usize]) -> Tensor {
    let nb = numel(shape);
    if nb == g.len() {
        return Tensor::new(shape.to_vec(), g.to_vec()).expect("broadcast grad");
    }
    let mut out = vec![0.0; nb];
    for chunk in g.chunks(nb) {
        for (o, gi) in out.iter_mut().zip(chunk) {
            *o += gi;
        }
    }
    Tensor::new(shape.to_vec(), out).expect("broadcast grad")
}

/// `f(a[i], b[i mod len(b)])`, where `len(b)` divides `len(a)`.
fn broadcast_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len());
    if b.len() == 1 {
        out.extend(a.iter().map(|&x| f(x, b[0])));
    } else {
        for chunk in a.chunks(b.len()) {
            out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
        }
    }
    out
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let in_strides = strides(t.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
    let n = t.numel();
    let mut out = Vec::with_capacity(n);
    // When the last axis stays last, whole rows are contiguous in the source.
    let (rank, run) = match perm.last() {
        Some(&p) if p == perm.len() - 1 => (perm.len() - 1, t.shape()[p]),
        _ => (perm.len(), 1),
    };
    if n == 0 || run == 0 {
        return Tensor::new(out_shape, out).expect("permute shape");
    }
    let mut counter = vec![0usize; rank];
    for _ in 0..n / run {
        let src: usize = (0..rank).map(|i| counter[i] * in_strides[perm[i]]).sum();
        out.extend_from_slice(&t.data()[src..src + run]);
        for d in (0..rank).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permute shape")
}
