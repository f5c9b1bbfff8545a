//! A small reverse-mode differentiation engine.
//!
//! A [`Graph`] is built up front from a closed set of tensor ops. Shapes are
//! inferred at construction time, so a malformed graph fails while it is being
//! built and the error names the offending node. Evaluation is a pure function
//! of the parameter bindings: graphs are immutable once built and may be
//! shared across threads.
//!
//! ```
//! use pouf_core::graph::{Bindings, Graph};
//! use pouf_core::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.parameter("x", &[3]).unwrap();
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum_all(sq);
//! g.set_output(loss).unwrap();
//!
//! let mut b = Bindings::new();
//! b.insert("x".into(), Tensor::vector(vec![1.0, 2.0, 3.0]));
//! assert_eq!(g.evaluate(&b).unwrap().item(), Some(14.0));
//! let grads = g.gradient(&b, &["x"]).unwrap();
//! assert_eq!(grads["x"].data(), &[2.0, 4.0, 6.0]);
//! ```

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

/// Rows whose L2 norm falls below this are rejected by `row_l2_normalize`.
pub const NORM_EPS: f64 = 1e-12;

pub type Bindings = BTreeMap<String, Tensor>;
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradError {
    #[error("node {node} ({op}): shape error: {detail}")]
    Shape { node: usize, op: &'static str, detail: String },
    #[error("node {node} ({op}): numeric domain error: {detail}")]
    NumericDomain { node: usize, op: &'static str, detail: String },
    #[error("parameter `{0}` is not bound")]
    Unbound(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter `{0}` declared twice")]
    DuplicateParameter(String),
    #[error("parameter `{name}` bound with shape {actual:?}, declared {expected:?}")]
    BindingShape { name: String, expected: Vec<usize>, actual: Vec<usize> },
    #[error("gradient requires a scalar output, found shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("graph has no designated output")]
    NoOutput,
}

#[derive(Clone, Debug)]
pub enum Op {
    Parameter(String),
    Constant(Tensor),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Tensor times a one-element node.
    ScalarMul(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    RowL2Normalize(NodeId),
    Softmax(NodeId, usize),
    Sum(NodeId, Option<usize>),
    Mean(NodeId, Option<usize>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Parameter(_) => "parameter",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::ScalarMul(..) => "scalar-mul",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::RowL2Normalize(_) => "row-l2-normalize",
            Op::Softmax(..) => "softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Parameter(_) | Op::Constant(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::ScalarMul(a, s) => vec![a, s],
            Op::Transpose(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::RowL2Normalize(a)
            | Op::Softmax(a, _)
            | Op::Sum(a, _)
            | Op::Mean(a, _) => vec![a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    /// True when some parameter is upstream of this node.
    varying: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
    output: Option<NodeId>,
}

/// All node values from one forward pass.
#[derive(Clone, Debug)]
pub struct Evaluation {
    values: Vec<Tensor>,
    output: Option<NodeId>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn output(&self) -> Option<&Tensor> {
        self.output.map(|id| &self.values[id.0])
    }
}

/// Iteration helper for reductions and softmax: a "lane" is one slice along
/// the reduced axis.
#[derive(Clone, Copy)]
struct Lanes {
    count: usize,
    len: usize,
    start_step: usize,
    stride: usize,
}

impl Lanes {
    fn of(shape: &[usize], axis: usize) -> Option<Self> {
        match (shape, axis) {
            ([n], 0) => Some(Lanes { count: 1, len: *n, start_step: 0, stride: 1 }),
            ([r, c], 0) => Some(Lanes { count: *c, len: *r, start_step: 1, stride: *c }),
            ([r, c], 1) => Some(Lanes { count: *r, len: *c, start_step: *c, stride: 1 }),
            _ => None,
        }
    }

    fn index(&self, lane: usize, k: usize) -> usize {
        lane * self.start_step + k * self.stride
    }

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s = shape.to_vec();
        s.remove(axis);
        s
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn parameter_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let varying = match &op {
            Op::Parameter(_) => true,
            Op::Constant(_) => false,
            other => other.inputs().iter().any(|i| self.nodes[i.0].varying),
        };
        self.nodes.push(Node { op, shape, varying });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, detail: String) -> GradError {
        GradError::Shape { node: self.nodes.len(), op, detail }
    }

    fn check_id(&self, op: &'static str, id: NodeId) -> Result<(), GradError> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(self.shape_err(op, format!("input node {} does not exist", id.0)))
        }
    }

    pub fn parameter(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, GradError> {
        if self.params.contains_key(name) {
            return Err(GradError::DuplicateParameter(name.to_string()));
        }
        if shape.len() > 2 {
            return Err(self.shape_err("parameter", format!("rank {} > 2", shape.len())));
        }
        let id = self.push(Op::Parameter(name.to_string()), shape.to_vec());
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape)
    }

    pub fn scalar_constant(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.check_id("matmul", a)?;
        self.check_id("matmul", b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => {
                let shape = vec![*m, *n];
                Ok(self.push(Op::MatMul(a, b), shape))
            }
            _ => Err(self.shape_err("matmul", format!("incompatible {sa:?} x {sb:?}"))),
        }
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        self.check_id("transpose", a)?;
        match *self.shape(a) {
            [r, c] => Ok(self.push(Op::Transpose(a), vec![c, r])),
            ref s => Err(self.shape_err("transpose", format!("needs rank 2, got {s:?}"))),
        }
    }

    fn same_shape(&mut self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>, GradError> {
        self.check_id(op, a)?;
        self.check_id(op, b)?;
        if self.shape(a) != self.shape(b) {
            let detail = format!("{:?} vs {:?}", self.shape(a), self.shape(b));
            return Err(self.shape_err(op, detail));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let s = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let s = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let s = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    /// `a * s` where `s` is any one-element node.
    pub fn scalar_mul(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, GradError> {
        self.check_id("scalar-mul", a)?;
        self.check_id("scalar-mul", s)?;
        let n: usize = self.shape(s).iter().product();
        if n != 1 {
            let detail = format!("scalar operand has shape {:?}", self.shape(s));
            return Err(self.shape_err("scalar-mul", detail));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::ScalarMul(a, s), shape))
    }

    /// `a * c` for a fixed constant `c`.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, GradError> {
        let s = self.scalar_constant(c);
        self.scalar_mul(a, s)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        self.check_id("exp", a)?;
        let s = self.shape(a).to_vec();
        Ok(self.push(Op::Exp(a), s))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        self.check_id("log", a)?;
        let s = self.shape(a).to_vec();
        Ok(self.push(Op::Log(a), s))
    }

    pub fn row_l2_normalize(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        self.check_id("row-l2-normalize", a)?;
        match *self.shape(a) {
            [r, c] => Ok(self.push(Op::RowL2Normalize(a), vec![r, c])),
            ref s => Err(self.shape_err("row-l2-normalize", format!("needs rank 2, got {s:?}"))),
        }
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId, GradError> {
        self.check_id("softmax", a)?;
        let s = self.shape(a).to_vec();
        if Lanes::of(&s, axis).is_none() {
            return Err(self.shape_err("softmax", format!("axis {axis} invalid for {s:?}")));
        }
        Ok(self.push(Op::Softmax(a, axis), s))
    }

    fn reduction(&mut self, op: &'static str, a: NodeId, axis: Option<usize>) -> Result<Vec<usize>, GradError> {
        self.check_id(op, a)?;
        let s = self.shape(a).to_vec();
        match axis {
            None => Ok(vec![]),
            Some(ax) if Lanes::of(&s, ax).is_some() => Ok(Lanes::reduced_shape(&s, ax)),
            Some(ax) => Err(self.shape_err(op, format!("axis {ax} invalid for {s:?}"))),
        }
    }

    pub fn sum(&mut self, a: NodeId, axis: usize) -> Result<NodeId, GradError> {
        let s = self.reduction("sum", a, Some(axis))?;
        Ok(self.push(Op::Sum(a, Some(axis)), s))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a, None), vec![])
    }

    pub fn mean(&mut self, a: NodeId, axis: usize) -> Result<NodeId, GradError> {
        let s = self.reduction("mean", a, Some(axis))?;
        Ok(self.push(Op::Mean(a, Some(axis)), s))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a, None), vec![])
    }

    pub fn set_output(&mut self, id: NodeId) -> Result<(), GradError> {
        self.check_id("output", id)?;
        self.output = Some(id);
        Ok(())
    }

    /// Runs the forward pass and keeps every intermediate value.
    pub fn forward(&self, bindings: &Bindings) -> Result<Evaluation, GradError> {
        for name in bindings.keys() {
            if !self.params.contains_key(name) {
                return Err(GradError::UnknownParameter(name.clone()));
            }
        }
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let v = self.forward_node(idx, node, &values, bindings)?;
            if !v.is_finite() {
                return Err(GradError::NumericDomain {
                    node: idx,
                    op: node.op.name(),
                    detail: "non-finite result".into(),
                });
            }
            values.push(v);
        }
        Ok(Evaluation { values, output: self.output })
    }

    /// Output tensor of the graph.
    pub fn evaluate(&self, bindings: &Bindings) -> Result<Tensor, GradError> {
        let out = self.output.ok_or(GradError::NoOutput)?;
        let mut eval = self.forward(bindings)?;
        Ok(eval.values.swap_remove(out.0))
    }

    fn forward_node(&self, idx: usize, node: &Node, vals: &[Tensor], bindings: &Bindings) -> Result<Tensor, GradError> {
        let v = |id: NodeId| &vals[id.0];
        let domain = |detail: String| GradError::NumericDomain { node: idx, op: node.op.name(), detail };
        let out = match &node.op {
            Op::Parameter(name) => {
                let t = bindings.get(name).ok_or_else(|| GradError::Unbound(name.clone()))?;
                if t.shape() != node.shape.as_slice() {
                    return Err(GradError::BindingShape {
                        name: name.clone(),
                        expected: node.shape.clone(),
                        actual: t.shape().to_vec(),
                    });
                }
                t.clone()
            }
            Op::Constant(t) => t.clone(),
            Op::MatMul(a, b) => matmul(v(*a), v(*b)),
            Op::Transpose(a) => v(*a).transpose(),
            Op::Add(a, b) => zip(v(*a), v(*b), |x, y| x + y),
            Op::Sub(a, b) => zip(v(*a), v(*b), |x, y| x - y),
            Op::Mul(a, b) => zip(v(*a), v(*b), |x, y| x * y),
            Op::ScalarMul(a, s) => {
                let s = v(*s).data()[0];
                v(*a).map(|x| x * s)
            }
            Op::Exp(a) => v(*a).map(f64::exp),
            Op::Log(a) => {
                if let Some(bad) = v(*a).data().iter().find(|&&x| x.is_nan() || x <= 0.0) {
                    return Err(domain(format!("log of non-positive value {bad}")));
                }
                v(*a).map(f64::ln)
            }
            Op::RowL2Normalize(a) => {
                let x = v(*a);
                let mut out = x.clone();
                let c = x.cols();
                for (r, row) in out.data_mut().chunks_mut(c.max(1)).enumerate() {
                    let norm = row.iter().map(|e| e * e).sum::<f64>().sqrt();
                    if norm.is_nan() || norm < NORM_EPS {
                        return Err(domain(format!("row {r} has norm {norm:e} below {NORM_EPS:e}")));
                    }
                    row.iter_mut().for_each(|e| *e /= norm);
                }
                out
            }
            Op::Softmax(a, axis) => {
                let x = v(*a);
                let lanes = Lanes::of(x.shape(), *axis).expect("validated at build");
                let mut out = x.clone();
                let d = out.data_mut();
                for lane in 0..lanes.count {
                    let max = (0..lanes.len).map(|k| x.data()[lanes.index(lane, k)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for k in 0..lanes.len {
                        let i = lanes.index(lane, k);
                        d[i] = (x.data()[i] - max).exp();
                        total += d[i];
                    }
                    for k in 0..lanes.len {
                        d[lanes.index(lane, k)] /= total;
                    }
                }
                out
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let x = v(*a);
                let mean = matches!(node.op, Op::Mean(..));
                match axis {
                    None => {
                        let s: f64 = x.data().iter().sum();
                        let n = x.len() as f64;
                        Tensor::scalar(if mean { s / n } else { s })
                    }
                    Some(ax) => {
                        let lanes = Lanes::of(x.shape(), *ax).expect("validated at build");
                        let data = (0..lanes.count)
                            .map(|lane| {
                                let s: f64 = (0..lanes.len).map(|k| x.data()[lanes.index(lane, k)]).sum();
                                if mean {
                                    s / lanes.len as f64
                                } else {
                                    s
                                }
                            })
                            .collect();
                        Tensor::new(node.shape.clone(), data).expect("reduced shape")
                    }
                }
            }
        };
        Ok(out)
    }

    /// Reverse pass over a completed forward evaluation.
    pub fn backward(&self, eval: &Evaluation, wrt: &[&str]) -> Result<Gradients, GradError> {
        let out = self.output.ok_or(GradError::NoOutput)?;
        let out_shape = &self.nodes[out.0].shape;
        if out_shape.iter().product::<usize>() != 1 {
            return Err(GradError::NonScalarOutput(out_shape.clone()));
        }
        let mut targets = BTreeSet::new();
        for name in wrt {
            let id = self.params.get(*name).ok_or_else(|| GradError::UnknownParameter(name.to_string()))?;
            targets.insert(*id);
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::filled(out_shape, 1.0));

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.varying {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            let y = &eval.values[idx];
            let val = |id: NodeId| &eval.values[id.0];
            let send = |grads: &mut Vec<Option<Tensor>>, id: NodeId, g: Tensor| {
                if !self.nodes[id.0].varying {
                    return;
                }
                match &mut grads[id.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Parameter(_) => {
                    // Leaf: keep the accumulated gradient for collection below.
                    grads[idx] = Some(dy);
                }
                Op::Constant(_) => {}
                Op::MatMul(a, b) => {
                    send(&mut grads, *a, matmul(&dy, &val(*b).transpose()));
                    send(&mut grads, *b, matmul(&val(*a).transpose(), &dy));
                }
                Op::Transpose(a) => send(&mut grads, *a, dy.transpose()),
                Op::Add(a, b) => {
                    send(&mut grads, *b, dy.clone());
                    send(&mut grads, *a, dy);
                }
                Op::Sub(a, b) => {
                    send(&mut grads, *b, dy.map(|g| -g));
                    send(&mut grads, *a, dy);
                }
                Op::Mul(a, b) => {
                    send(&mut grads, *a, zip(&dy, val(*b), |g, x| g * x));
                    send(&mut grads, *b, zip(&dy, val(*a), |g, x| g * x));
                }
                Op::ScalarMul(a, s) => {
                    let sv = val(*s).data()[0];
                    let ds: f64 = dy.data().iter().zip(val(*a).data()).map(|(g, x)| g * x).sum();
                    send(&mut grads, *a, dy.map(|g| g * sv));
                    send(&mut grads, *s, Tensor::filled(self.shape(*s), ds));
                }
                Op::Exp(a) => send(&mut grads, *a, zip(&dy, y, |g, e| g * e)),
                Op::Log(a) => send(&mut grads, *a, zip(&dy, val(*a), |g, x| g / x)),
                Op::RowL2Normalize(a) => {
                    let x = val(*a);
                    let c = x.cols();
                    let mut dx = dy.clone();
                    for r in 0..x.rows() {
                        let norm = x.row(r).iter().map(|e| e * e).sum::<f64>().sqrt();
                        let yr = y.row(r);
                        let gr = dy.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx.data_mut()[r * c + j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                    send(&mut grads, *a, dx);
                }
                Op::Softmax(a, axis) => {
                    let lanes = Lanes::of(y.shape(), *axis).expect("validated at build");
                    let mut dx = dy.clone();
                    for lane in 0..lanes.count {
                        let dot: f64 = (0..lanes.len)
                            .map(|k| {
                                let i = lanes.index(lane, k);
                                dy.data()[i] * y.data()[i]
                            })
                            .sum();
                        for k in 0..lanes.len {
                            let i = lanes.index(lane, k);
                            dx.data_mut()[i] = y.data()[i] * (dy.data()[i] - dot);
                        }
                    }
                    send(&mut grads, *a, dx);
                }
                Op::Sum(a, axis) | Op::Mean(a, axis) => {
                    let in_shape = self.shape(*a).to_vec();
                    let mean = matches!(node.op, Op::Mean(..));
                    let mut dx = Tensor::zeros(&in_shape);
                    match axis {
                        None => {
                            let n = dx.len() as f64;
                            let g = dy.data()[0] / if mean { n } else { 1.0 };
                            dx.data_mut().iter_mut().for_each(|e| *e = g);
                        }
                        Some(ax) => {
                            let lanes = Lanes::of(&in_shape, *ax).expect("validated at build");
                            let div = if mean { lanes.len as f64 } else { 1.0 };
                            for lane in 0..lanes.count {
                                let g = dy.data()[lane] / div;
                                for k in 0..lanes.len {
                                    dx.data_mut()[lanes.index(lane, k)] = g;
                                }
                            }
                        }
                    }
                    send(&mut grads, *a, dx);
                }
            }
        }

        let mut result = Gradients::new();
        for name in wrt {
            let id = self.params[*name];
            let g = grads[id.0].take().unwrap_or_else(|| Tensor::zeros(self.shape(id)));
            result.insert(name.to_string(), g);
        }
        Ok(result)
    }

    /// Gradient of the scalar output with respect to the named parameters.
    pub fn gradient(&self, bindings: &Bindings, wrt: &[&str]) -> Result<Gradients, GradError> {
        let out = self.output.ok_or(GradError::NoOutput)?;
        let shape = self.shape(out);
        if shape.iter().product::<usize>() != 1 {
            return Err(GradError::NonScalarOutput(shape.to_vec()));
        }
        for name in wrt {
            if !self.params.contains_key(*name) {
                return Err(GradError::UnknownParameter(name.to_string()));
            }
        }
        let eval = self.forward(bindings)?;
        self.backward(&eval, wrt)
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Central finite differences of a scalar function of the bindings.
pub fn finite_difference<F>(mut f: F, bindings: &Bindings, wrt: &[&str], h: f64) -> Result<Gradients>
where
    F: FnMut(&Bindings) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut work = bindings.clone();
    let mut out = Gradients::new();
    for name in wrt {
        let base = bindings.get(*name).ok_or_else(|| GradError::Unbound(name.to_string()))?.clone();
        let mut g = Tensor::zeros(base.shape());
        for i in 0..base.len() {
            let x0 = base.data()[i];
            work.get_mut(*name).unwrap().data_mut()[i] = x0 + h;
            let fp = f(&work)?;
            work.get_mut(*name).unwrap().data_mut()[i] = x0 - h;
            let fm = f(&work)?;
            work.get_mut(*name).unwrap().data_mut()[i] = x0;
            g.data_mut()[i] = (fp - fm) / (2.0 * h);
        }
        out.insert(name.to_string(), g);
    }
    Ok(out)
}
