//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op is evaluated as soon as it is recorded, so a freshly built graph
//! already holds all forward values. [`Graph::forward`] re-evaluates the whole
//! tape after leaf values change (used by finite-difference checks).
//!
//! Shape errors are contract violations and panic with both shapes in the
//! message. Non-finite values are recorded and surfaced as
//! [`Error::NumericOverflow`] by [`Graph::check_finite`] and [`Graph::forward`].

use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, split_axis, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Constant,
    Param,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId, f64),
    MulScalar(NodeId, f64),
    PowScalar(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Abs(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    MatMul(NodeId, NodeId),
    /// Swaps the last two axes.
    Transpose(NodeId),
    Reshape(NodeId, Vec<usize>),
    /// Softmax over the last axis.
    Softmax(NodeId),
    Sum(NodeId, Option<usize>),
    Mean(NodeId, Option<usize>),
    Max(NodeId, usize),
    Median(NodeId, usize),
    Concat(Vec<NodeId>, usize),
    /// Inverted dropout; the mask already carries the `1/keep` scale.
    Dropout(NodeId, Vec<f64>),
    FrobeniusNorm(NodeId),
    /// `uᵀ M u` over the last axis of `u`.
    QuadForm(NodeId, NodeId),
    /// Row-wise solve of `L x = b` for lower-triangular `L`.
    TriSolve(NodeId, NodeId),
    /// Lower triangle with the diagonal exponentiated.
    TrilExpDiag(NodeId),
    Diagonal(NodeId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::PowScalar(..) => "pow_scalar",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Abs(_) => "abs",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Softmax(_) => "softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Max(..) => "max",
            Op::Median(..) => "median",
            Op::Concat(..) => "concat",
            Op::Dropout(..) => "dropout",
            Op::FrobeniusNorm(_) => "frobenius_norm",
            Op::QuadForm(..) => "quad_form",
            Op::TriSolve(..) => "tri_solve",
            Op::TrilExpDiag(_) => "tril_exp_diag",
            Op::Diagonal(_) => "diagonal",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Constant | Param => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) | QuadForm(a, b)
            | TriSolve(a, b) => vec![*a, *b],
            AddScalar(a, _) | MulScalar(a, _) | PowScalar(a, _) | Exp(a) | Log(a) | Sqrt(a)
            | Abs(a) | Sigmoid(a) | Relu(a) | Transpose(a) | Reshape(a, _) | Softmax(a)
            | Sum(a, _) | Mean(a, _) | Max(a, _) | Median(a, _) | Dropout(a, _)
            | FrobeniusNorm(a) | TrilExpDiag(a) | Diagonal(a) => vec![*a],
            Concat(xs, _) => xs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub value: Tensor,
    requires_grad: bool,
}

/// Gradients of the trainable leaves, keyed by node.
pub type Gradients = BTreeMap<NodeId, Tensor>;

#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
    training: bool,
    nan_check: bool,
    first_non_finite: Option<NodeId>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    /// Evaluation-mode graph (dropout is the identity).
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: Vec::new(), training: false, nan_check: true, first_non_finite: None }
    }

    /// Training-mode graph (dropout draws masks).
    pub fn training() -> Self {
        Graph { training: true, ..Graph::new() }
    }

    /// Disables non-finite tracking. Debug builds keep it on regardless.
    pub fn without_nan_check(mut self) -> Self {
        self.nan_check = cfg!(debug_assertions);
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Op::Constant, value, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push_leaf(Op::Param, value, true);
        self.params.push(id);
        id
    }

    /// Replaces a leaf's value. Call [`Graph::forward`] afterwards.
    pub fn set_value(&mut self, id: NodeId, value: Tensor) {
        let node = &mut self.nodes[id.0];
        assert!(matches!(node.op, Op::Constant | Op::Param), "set_value on non-leaf node {:?}", id);
        assert_eq!(node.value.shape(), value.shape(), "set_value shape mismatch");
        node.value = value;
    }

    fn push_leaf(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.note_finite(id, &value);
        self.nodes.push(Node { op, value, requires_grad });
        id
    }

    fn push(&mut self, op: Op) -> NodeId {
        let value = self.eval(&op);
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.note_finite(id, &value);
        self.nodes.push(Node { op, value, requires_grad });
        id
    }

    fn note_finite(&mut self, id: NodeId, value: &Tensor) {
        if self.nan_check && self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(id);
        }
    }

    /// Reports the first node whose value was not finite.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some(id) => Err(Error::NumericOverflow {
                node: id.0,
                op: self.nodes[id.0].op.name().to_string(),
            }),
            None => Ok(()),
        }
    }

    /// Re-evaluates every non-leaf node in recording order and returns the
    /// value of the last node.
    pub fn forward(&mut self) -> Result<Tensor> {
        assert!(!self.nodes.is_empty(), "forward on empty graph");
        self.first_non_finite = None;
        for i in 0..self.nodes.len() {
            if !matches!(self.nodes[i].op, Op::Constant | Op::Param) {
                let op = self.nodes[i].op.clone();
                self.nodes[i].value = self.eval(&op);
            }
            if self.nan_check && !self.nodes[i].value.is_finite() {
                self.first_non_finite = Some(NodeId(i));
                return Err(Error::NumericOverflow { node: i, op: self.nodes[i].op.name().to_string() });
            }
        }
        Ok(self.nodes.last().unwrap().value.clone())
    }

    // ---- op constructors ----

    fn binary_shape(&self, name: &str, a: NodeId, b: NodeId) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if broadcast_shape(sa, sb).is_none() {
            panic!("{}: shapes {:?} and {:?} are not broadcast-compatible", name, sa, sb);
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_shape("add", a, b);
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_shape("sub", a, b);
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_shape("mul", a, b);
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_shape("div", a, b);
        self.push(Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::AddScalar(a, c))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::MulScalar(a, c))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.mul_scalar(a, -1.0)
    }

    pub fn powf(&mut self, a: NodeId, p: f64) -> NodeId {
        self.push(Op::PowScalar(a, p))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.mul(a, a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sqrt(a))
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Abs(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            panic!("matmul: incompatible shapes {:?} and {:?}", sa, sb);
        }
        self.push(Op::MatMul(a, b))
    }

    /// `x·W + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        self.add(xw, b)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        assert!(self.shape(a).len() >= 2, "transpose: need rank >= 2, got {:?}", self.shape(a));
        self.push(Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Vec<usize>>) -> NodeId {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            panic!("reshape: cannot view {:?} as {:?}", self.shape(a), shape);
        }
        self.push(Op::Reshape(a, shape))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        assert!(!self.shape(a).is_empty(), "softmax on a scalar");
        self.push(Op::Softmax(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a, None))
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        self.check_axis("sum", a, axis);
        self.push(Op::Sum(a, Some(axis)))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a, None))
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        self.check_axis("mean", a, axis);
        self.push(Op::Mean(a, Some(axis)))
    }

    pub fn max_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        self.check_axis("max", a, axis);
        self.push(Op::Max(a, axis))
    }

    pub fn median_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        self.check_axis("median", a, axis);
        self.push(Op::Median(a, axis))
    }

    fn check_axis(&self, name: &str, a: NodeId, axis: usize) {
        let s = self.shape(a);
        if axis >= s.len() || s[axis] == 0 {
            panic!("{}: invalid axis {} for shape {:?}", name, axis, s);
        }
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> NodeId {
        assert!(!xs.is_empty(), "concat of nothing");
        let first = self.shape(xs[0]).to_vec();
        assert!(axis < first.len(), "concat: axis {} out of range for {:?}", axis, first);
        for &x in &xs[1..] {
            let s = self.shape(x);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (p, q))| i == axis || p == q);
            if !ok {
                panic!("concat: shapes {:?} and {:?} differ off axis {}", first, s, axis);
            }
        }
        self.push(Op::Concat(xs.to_vec(), axis))
    }

    /// Inverted dropout with drop probability `rate`; identity in eval mode.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: NodeId, rate: f64, rng: &mut R) -> NodeId {
        assert!((0.0..1.0).contains(&rate), "dropout rate {} outside [0,1)", rate);
        if !self.training || rate == 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let mask = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.push(Op::Dropout(a, mask))
    }

    pub fn frobenius_norm(&mut self, a: NodeId) -> NodeId {
        self.push(Op::FrobeniusNorm(a))
    }

    pub fn quad_form(&mut self, u: NodeId, m: NodeId) -> NodeId {
        let (su, sm) = (self.shape(u), self.shape(m));
        let d = *su.last().unwrap_or(&0);
        if sm != [d, d] {
            panic!("quad_form: vector shape {:?} incompatible with matrix {:?}", su, sm);
        }
        self.push(Op::QuadForm(u, m))
    }

    /// Solves `L x = b` for every row `b` of the trailing `n × d` block,
    /// with one lower-triangular `L` per leading batch index.
    pub fn tri_solve(&mut self, l: NodeId, b: NodeId) -> NodeId {
        let (sl, sb) = (self.shape(l), self.shape(b));
        let ok = sl.len() >= 2
            && sl.len() == sb.len()
            && sl[sl.len() - 1] == sl[sl.len() - 2]
            && sb[sb.len() - 1] == sl[sl.len() - 1]
            && sl[..sl.len() - 2] == sb[..sb.len() - 2];
        if !ok {
            panic!("tri_solve: factor shape {:?} incompatible with rhs {:?}", sl, sb);
        }
        self.push(Op::TriSolve(l, b))
    }

    pub fn tril_exp_diag(&mut self, a: NodeId) -> NodeId {
        self.check_square("tril_exp_diag", a);
        self.push(Op::TrilExpDiag(a))
    }

    pub fn diagonal(&mut self, a: NodeId) -> NodeId {
        self.check_square("diagonal", a);
        self.push(Op::Diagonal(a))
    }

    fn check_square(&self, name: &str, a: NodeId) {
        let s = self.shape(a);
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            panic!("{}: expected trailing square matrix, got {:?}", name, s);
        }
    }

    // ---- evaluation ----

    fn eval(&self, op: &Op) -> Tensor {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        match op {
            Op::Constant | Op::Param => unreachable!("leaves are not evaluated"),
            Op::Add(a, b) => broadcast_binary(v(a), v(b), |x, y| x + y),
            Op::Sub(a, b) => broadcast_binary(v(a), v(b), |x, y| x - y),
            Op::Mul(a, b) => broadcast_binary(v(a), v(b), |x, y| x * y),
            Op::Div(a, b) => broadcast_binary(v(a), v(b), |x, y| x / y),
            Op::AddScalar(a, c) => v(a).map(|x| x + c),
            Op::MulScalar(a, c) => v(a).map(|x| x * c),
            Op::PowScalar(a, p) => v(a).map(|x| x.powf(*p)),
            Op::Exp(a) => v(a).map(f64::exp),
            Op::Log(a) => v(a).map(f64::ln),
            Op::Sqrt(a) => v(a).map(f64::sqrt),
            Op::Abs(a) => v(a).map(f64::abs),
            Op::Sigmoid(a) => v(a).map(sigmoid),
            Op::Relu(a) => v(a).map(|x| x.max(0.0)),
            Op::MatMul(a, b) => matmul(v(a), v(b)),
            Op::Transpose(a) => transpose_last(v(a)),
            Op::Reshape(a, s) => v(a).clone().reshaped(s.clone()),
            Op::Softmax(a) => softmax_last(v(a)),
            Op::Sum(a, axis) => reduce_sum(v(a), *axis, 1.0),
            Op::Mean(a, axis) => {
                let x = v(a);
                let n = match axis {
                    None => x.len(),
                    Some(ax) => x.shape()[*ax],
                };
                reduce_sum(x, *axis, 1.0 / n as f64)
            }
            Op::Max(a, axis) => select_axis(v(a), *axis, argmax).0,
            Op::Median(a, axis) => select_axis(v(a), *axis, argmedian).0,
            Op::Concat(xs, axis) => {
                let parts: Vec<&Tensor> = xs.iter().map(v).collect();
                concat(&parts, *axis)
            }
            Op::Dropout(a, mask) => {
                let x = v(a);
                let data = x.data().iter().zip(mask).map(|(x, m)| x * m).collect();
                Tensor::new(x.shape(), data)
            }
            Op::FrobeniusNorm(a) => Tensor::scalar(v(a).data().iter().map(|x| x * x).sum::<f64>().sqrt()),
            Op::QuadForm(u, m) => quad_form(v(u), v(m)),
            Op::TriSolve(l, b) => tri_solve(v(l), v(b)),
            Op::TrilExpDiag(a) => tril_exp_diag(v(a)),
            Op::Diagonal(a) => diagonal(v(a)),
        }
    }

    // ---- differentiation ----

    /// Reverse sweep from a scalar `root`; returns gradients of every
    /// parameter leaf that `root` depends on (zeros for unreached ones).
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward: root must be scalar, got shape {:?}",
            self.shape(root)
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        let mut out = Gradients::new();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Param = node.op {
                out.insert(NodeId(i), g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }
        for &p in &self.params {
            if p.0 <= root.0 {
                out.entry(p).or_insert_with(|| Tensor::zeros(self.shape(p)));
            }
        }
        out
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, op: &Op, y: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        let mut acc = |id: NodeId, t: Tensor| {
            if !self.wants(id) {
                return;
            }
            match &mut grads[id.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match op {
            Op::Constant | Op::Param => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, unbroadcast(g, v(a).shape(), v(b).shape(), |g, _, _| g, v(a), v(b), true));
                }
                if self.wants(*b) {
                    acc(*b, unbroadcast(g, v(a).shape(), v(b).shape(), |g, _, _| g, v(a), v(b), false));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, unbroadcast(g, v(a).shape(), v(b).shape(), |g, _, _| g, v(a), v(b), true));
                }
                if self.wants(*b) {
                    acc(*b, unbroadcast(g, v(a).shape(), v(b).shape(), |g, _, _| -g, v(a), v(b), false));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, unbroadcast(g, v(a).shape(), v(b).shape(), |g, _, y| g * y, v(a), v(b), true));
                }
                if self.wants(*b) {
                    acc(*b, unbroadcast(g, v(a).shape(), v(b).shape(), |g, x, _| g * x, v(a), v(b), false));
                }
            }
            Op::Div(a, b) => {
                if self.wants(*a) {
                    acc(*a, unbroadcast(g, v(a).shape(), v(b).shape(), |g, _, y| g / y, v(a), v(b), true));
                }
                if self.wants(*b) {
                    acc(
                        *b,
                        unbroadcast(g, v(a).shape(), v(b).shape(), |g, x, y| -g * x / (y * y), v(a), v(b), false),
                    );
                }
            }
            Op::AddScalar(a, _) => acc(*a, g.clone()),
            Op::MulScalar(a, c) => acc(*a, g.map(|x| x * c)),
            Op::PowScalar(a, p) => acc(*a, zip_map(g, v(a), |g, x| g * p * x.powf(p - 1.0))),
            Op::Exp(a) => acc(*a, zip_map(g, y, |g, y| g * y)),
            Op::Log(a) => acc(*a, zip_map(g, v(a), |g, x| g / x)),
            Op::Sqrt(a) => acc(*a, zip_map(g, y, |g, y| 0.5 * g / y)),
            Op::Abs(a) => acc(*a, zip_map(g, v(a), |g, x| if x > 0.0 { g } else if x < 0.0 { -g } else { 0.0 })),
            Op::Sigmoid(a) => acc(*a, zip_map(g, y, |g, y| g * y * (1.0 - y))),
            Op::Relu(a) => acc(*a, zip_map(g, v(a), |g, x| if x > 0.0 { g } else { 0.0 })),
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    acc(*a, matmul(g, &transpose_last(v(b))));
                }
                if self.wants(*b) {
                    acc(*b, matmul(&transpose_last(v(a)), g));
                }
            }
            Op::Transpose(a) => acc(*a, transpose_last(g)),
            Op::Reshape(a, _) => acc(*a, g.clone().reshaped(v(a).shape())),
            Op::Softmax(a) => {
                let d = *y.shape().last().unwrap();
                let mut out = Tensor::zeros(y.shape());
                for ((gr, yr), or) in g.data().chunks(d).zip(y.data().chunks(d)).zip(out.data_mut().chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((o, g), y) in or.iter_mut().zip(gr).zip(yr) {
                        *o = y * (g - dot);
                    }
                }
                acc(*a, out)
            }
            Op::Sum(a, axis) => acc(*a, expand_reduced(g, v(a).shape(), *axis, 1.0)),
            Op::Mean(a, axis) => {
                let x = v(a);
                let n = match axis {
                    None => x.len(),
                    Some(ax) => x.shape()[*ax],
                };
                acc(*a, expand_reduced(g, x.shape(), *axis, 1.0 / n as f64))
            }
            Op::Max(a, axis) => acc(*a, route_selected(g, v(a), *axis, argmax)),
            Op::Median(a, axis) => acc(*a, route_selected(g, v(a), *axis, argmedian)),
            Op::Concat(xs, axis) => {
                let (outer, _, inner) = split_axis(g.shape(), *axis);
                let total = g.shape()[*axis];
                let mut offset = 0;
                for x in xs {
                    let len = v(x).shape()[*axis];
                    if self.wants(*x) {
                        let mut part = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            part.extend_from_slice(&g.data()[start..start + len * inner]);
                        }
                        acc(*x, Tensor::new(v(x).shape(), part));
                    }
                    offset += len;
                }
            }
            Op::Dropout(a, mask) => {
                let data = g.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                acc(*a, Tensor::new(g.shape(), data))
            }
            Op::FrobeniusNorm(a) => {
                let norm = y.item();
                let gs = g.item();
                let scale = if norm > 0.0 { gs / norm } else { 0.0 };
                acc(*a, v(a).map(|x| x * scale))
            }
            Op::QuadForm(u, m) => {
                let (uv, mv) = (v(u), v(m));
                let d = mv.shape()[0];
                let md = mv.data();
                if self.wants(*u) {
                    let mut gu = Tensor::zeros(uv.shape());
                    for ((ur, gur), &gi) in uv.data().chunks(d).zip(gu.data_mut().chunks_mut(d)).zip(g.data()) {
                        for i in 0..d {
                            let mut s = 0.0;
                            for j in 0..d {
                                s += (md[i * d + j] + md[j * d + i]) * ur[j];
                            }
                            gur[i] = gi * s;
                        }
                    }
                    acc(*u, gu);
                }
                if self.wants(*m) {
                    let mut gm = Tensor::zeros([d, d]);
                    for (ur, &gi) in uv.data().chunks(d).zip(g.data()) {
                        let gmd = gm.data_mut();
                        for i in 0..d {
                            for j in 0..d {
                                gmd[i * d + j] += gi * ur[i] * ur[j];
                            }
                        }
                    }
                    acc(*m, gm);
                }
            }
            Op::TriSolve(l, b) => {
                let (gl, gb) = tri_solve_backward(v(l), y, g);
                if self.wants(*l) {
                    acc(*l, gl);
                }
                if self.wants(*b) {
                    acc(*b, gb);
                }
            }
            Op::TrilExpDiag(a) => {
                let d = *y.shape().last().unwrap();
                let mut out = Tensor::zeros(y.shape());
                for ((gm, ym), om) in g.data().chunks(d * d).zip(y.data().chunks(d * d)).zip(out.data_mut().chunks_mut(d * d)) {
                    for i in 0..d {
                        for j in 0..i {
                            om[i * d + j] = gm[i * d + j];
                        }
                        om[i * d + i] = gm[i * d + i] * ym[i * d + i];
                    }
                }
                acc(*a, out)
            }
            Op::Diagonal(a) => {
                let s = v(a).shape();
                let d = *s.last().unwrap();
                let mut out = Tensor::zeros(s);
                for (gv, om) in g.data().chunks(d).zip(out.data_mut().chunks_mut(d * d)) {
                    for i in 0..d {
                        om[i * d + i] = gv[i];
                    }
                }
                acc(*a, out)
            }
        }
    }
}

// ---- kernels ----

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&g, &x)| f(g, x)).collect();
    Tensor::new(g.shape(), data)
}

fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape(), data);
    }
    let out = broadcast_shape(a.shape(), b.shape()).expect("checked at construction");
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![0.0; out.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    Tensor::new(out, data)
}

/// Gradient of a broadcast binary op for one operand: applies `f(g, a, b)`
/// elementwise over the output and sums back to that operand's shape.
fn unbroadcast(
    g: &Tensor,
    sa: &[usize],
    sb: &[usize],
    f: impl Fn(f64, f64, f64) -> f64,
    a: &Tensor,
    b: &Tensor,
    for_a: bool,
) -> Tensor {
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    if sa == sb {
        let data = (0..gd.len()).map(|i| f(gd[i], ad[i], bd[i])).collect();
        return Tensor::new(sa, data);
    }
    let out = g.shape();
    let stra = broadcast_strides(sa, out);
    let strb = broadcast_strides(sb, out);
    let target = if for_a { sa } else { sb };
    let mut res = Tensor::zeros(target);
    let rd = res.data_mut();
    for_each_broadcast(out, &stra, &strb, |o, ia, ib| {
        let val = f(gd[o], ad[ia], bd[ib]);
        if for_a {
            rd[ia] += val;
        } else {
            rd[ib] += val;
        }
    });
    res
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let p = b.shape()[1];
    let mut out = vec![0.0; n * p];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..n {
        let orow = &mut out[i * p..(i + 1) * p];
        for t in 0..k {
            let x = ad[i * k + t];
            if x == 0.0 {
                continue;
            }
            let brow = &bd[t * p..(t + 1) * p];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    Tensor::new([n, p], out)
}

fn transpose_last(a: &Tensor) -> Tensor {
    let s = a.shape();
    let r = s.len();
    let (rows, cols) = (s[r - 2], s[r - 1]);
    let mut shape = s.to_vec();
    shape.swap(r - 2, r - 1);
    let mut out = vec![0.0; a.len()];
    let block = rows * cols;
    for (src, dst) in a.data().chunks(block.max(1)).zip(out.chunks_mut(block.max(1))) {
        for i in 0..rows {
            for j in 0..cols {
                dst[j * rows + i] = src[i * cols + j];
            }
        }
    }
    Tensor::new(shape, out)
}

fn softmax_last(a: &Tensor) -> Tensor {
    let d = *a.shape().last().unwrap();
    let mut out = a.clone();
    for row in out.data_mut().chunks_mut(d) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            s += *x;
        }
        for x in row.iter_mut() {
            *x /= s;
        }
    }
    out
}

fn reduce_sum(a: &Tensor, axis: Option<usize>, scale: f64) -> Tensor {
    match axis {
        None => Tensor::scalar(a.sum() * scale),
        Some(ax) => {
            let (outer, n, inner) = split_axis(a.shape(), ax);
            let mut out = vec![0.0; outer * inner];
            let d = a.data();
            for o in 0..outer {
                for j in 0..n {
                    let src = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                    for (x, y) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *x += y;
                    }
                }
            }
            for x in &mut out {
                *x *= scale;
            }
            let mut shape = a.shape().to_vec();
            shape.remove(ax);
            Tensor::new(shape, out)
        }
    }
}

fn expand_reduced(g: &Tensor, shape: &[usize], axis: Option<usize>, scale: f64) -> Tensor {
    match axis {
        None => Tensor::full(shape, g.item() * scale),
        Some(ax) => {
            let (outer, n, inner) = split_axis(shape, ax);
            let mut out = vec![0.0; outer * n * inner];
            let gd = g.data();
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        out[(o * n + j) * inner + i] = gd[o * inner + i] * scale;
                    }
                }
            }
            Tensor::new(shape, out)
        }
    }
}

/// Index of the maximum; lowest index wins ties.
fn argmax(vals: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in vals.iter().enumerate() {
        if v > vals[best] {
            best = i;
        }
    }
    best
}

/// Index of the (lower) median; ties broken by lowest index.
fn argmedian(vals: &[f64]) -> usize {
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(a.cmp(&b)));
    idx[(vals.len() - 1) / 2]
}

fn select_axis(a: &Tensor, axis: usize, pick: fn(&[f64]) -> usize) -> (Tensor, Vec<usize>) {
    let (outer, n, inner) = split_axis(a.shape(), axis);
    let d = a.data();
    let mut out = vec![0.0; outer * inner];
    let mut chosen = vec![0; outer * inner];
    let mut buf = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            for j in 0..n {
                buf[j] = d[(o * n + j) * inner + i];
            }
            let k = pick(&buf);
            out[o * inner + i] = buf[k];
            chosen[o * inner + i] = k;
        }
    }
    let mut shape = a.shape().to_vec();
    shape.remove(axis);
    (Tensor::new(shape, out), chosen)
}

fn route_selected(g: &Tensor, a: &Tensor, axis: usize, pick: fn(&[f64]) -> usize) -> Tensor {
    let (_, chosen) = select_axis(a, axis, pick);
    let (outer, n, inner) = split_axis(a.shape(), axis);
    let mut out = Tensor::zeros(a.shape());
    let od = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let k = chosen[o * inner + i];
            od[(o * n + k) * inner + i] = g.data()[o * inner + i];
        }
    }
    out
}

fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
    let mut shape = parts[0].shape().to_vec();
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    shape[axis] = total;
    let (outer, _, inner) = split_axis(&shape, axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
        }
    }
    Tensor::new(shape, data)
}

fn quad_form(u: &Tensor, m: &Tensor) -> Tensor {
    let d = m.shape()[0];
    let md = m.data();
    let vals = u
        .data()
        .chunks(d)
        .map(|ur| {
            let mut s = 0.0;
            for i in 0..d {
                for j in 0..d {
                    s += ur[i] * md[i * d + j] * ur[j];
                }
            }
            s
        })
        .collect();
    let mut shape = u.shape().to_vec();
    shape.pop();
    Tensor::new(shape, vals)
}

fn tri_solve(l: &Tensor, b: &Tensor) -> Tensor {
    let s = b.shape();
    let (n, d) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = b.clone();
    for (lm, xb) in l.data().chunks(d * d).zip(out.data_mut().chunks_mut((n * d).max(1))) {
        for x in xb.chunks_mut(d) {
            forward_subst(lm, x, d);
        }
    }
    out
}

/// In-place solve of `L x = b` (b overwritten by x).
fn forward_subst(l: &[f64], x: &mut [f64], d: usize) {
    for i in 0..d {
        let mut s = x[i];
        for j in 0..i {
            s -= l[i * d + j] * x[j];
        }
        x[i] = s / l[i * d + i];
    }
}

/// In-place solve of `Lᵀ z = g`.
fn backward_subst_transposed(l: &[f64], z: &mut [f64], d: usize) {
    for i in (0..d).rev() {
        let mut s = z[i];
        for j in i + 1..d {
            s -= l[j * d + i] * z[j];
        }
        z[i] = s / l[i * d + i];
    }
}

fn tri_solve_backward(l: &Tensor, x: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let s = x.shape();
    let (n, d) = (s[s.len() - 2], s[s.len() - 1]);
    let mut gb = g.clone();
    let mut gl = Tensor::zeros(l.shape());
    let block = (n * d).max(1);
    for ((lm, glm), (xb, gbb)) in l
        .data()
        .chunks(d * d)
        .zip(gl.data_mut().chunks_mut(d * d))
        .zip(x.data().chunks(block).zip(gb.data_mut().chunks_mut(block)))
    {
        for (xr, zr) in xb.chunks(d).zip(gbb.chunks_mut(d)) {
            backward_subst_transposed(lm, zr, d);
            for i in 0..d {
                for j in 0..=i {
                    glm[i * d + j] -= zr[i] * xr[j];
                }
            }
        }
    }
    (gl, gb)
}

fn tril_exp_diag(a: &Tensor) -> Tensor {
    let d = *a.shape().last().unwrap();
    let mut out = Tensor::zeros(a.shape());
    for (am, om) in a.data().chunks(d * d).zip(out.data_mut().chunks_mut(d * d)) {
        for i in 0..d {
            for j in 0..i {
                om[i * d + j] = am[i * d + j];
            }
            om[i * d + i] = am[i * d + i].exp();
        }
    }
    out
}

fn diagonal(a: &Tensor) -> Tensor {
    let s = a.shape();
    let d = *s.last().unwrap();
    let data = a.data().chunks(d * d).flat_map(|m| (0..d).map(move |i| m[i * d + i])).collect();
    Tensor::new(&s[..s.len() - 1], data)
}
