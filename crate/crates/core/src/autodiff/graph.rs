use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use super::kernels;
use crate::error::{Error, Result};
use crate::quant::QuantScheme;
use crate::tensor::{numel, Tensor};

/// Index of a node in a [`Graph`]. Parents always have smaller ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Variable,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Recip(NodeId),
    Sqrt(NodeId),
    Relu(NodeId),
    Abs(NodeId),
    /// `1[x > 0]`; locally constant, carries no gradient.
    Step(NodeId),
    /// `sign(x)` with `sign(0) = 0`; locally constant, carries no gradient.
    Sign(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Single-element tensor broadcast to the node's shape.
    Expand(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// `x W + b` with `b` broadcast over rows.
    Affine(NodeId, NodeId, NodeId),
    SumRows(NodeId),
    BroadcastRows(NodeId, usize),
    SumCols(NodeId),
    BroadcastCols(NodeId, usize),
    Softmax(NodeId),
    SoftmaxCrossEntropy(NodeId, Arc<[usize]>),
    Conv2d(NodeId, NodeId),
    Conv2dInputGrad(NodeId, NodeId),
    Conv2dKernelGrad(NodeId, NodeId),
    AvgPool2d(NodeId, usize),
    AvgPool2dAdjoint(NodeId, usize),
    Reshape(NodeId),
    /// Forward rounds to the grid, backward is the identity.
    QuantizeSte(NodeId, QuantScheme),
    /// Plain rounding; not differentiable.
    Quantize(NodeId, QuantScheme),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Variable => "variable",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Recip(..) => "recip",
            Op::Sqrt(..) => "sqrt",
            Op::Relu(..) => "relu",
            Op::Abs(..) => "abs",
            Op::Step(..) => "step",
            Op::Sign(..) => "sign",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Expand(..) => "expand",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Affine(..) => "affine",
            Op::SumRows(..) => "sum_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::SumCols(..) => "sum_cols",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::Softmax(..) => "softmax",
            Op::SoftmaxCrossEntropy(..) => "softmax_cross_entropy",
            Op::Conv2d(..) => "conv2d",
            Op::Conv2dInputGrad(..) => "conv2d_input_grad",
            Op::Conv2dKernelGrad(..) => "conv2d_kernel_grad",
            Op::AvgPool2d(..) => "avg_pool2d",
            Op::AvgPool2dAdjoint(..) => "avg_pool2d_adjoint",
            Op::Reshape(..) => "reshape",
            Op::QuantizeSte(..) => "quantize_ste",
            Op::Quantize(..) => "quantize",
        }
    }

    pub fn parents(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Variable | Constant => vec![],
            Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | MatMul(a, b)
            | Conv2d(a, b)
            | Conv2dInputGrad(a, b)
            | Conv2dKernelGrad(a, b) => vec![*a, *b],
            Affine(a, b, c) => vec![*a, *b, *c],
            Neg(a)
            | Scale(a, _)
            | Recip(a)
            | Sqrt(a)
            | Relu(a)
            | Abs(a)
            | Step(a)
            | Sign(a)
            | Sum(a)
            | Mean(a)
            | Expand(a)
            | Transpose(a)
            | SumRows(a)
            | BroadcastRows(a, _)
            | SumCols(a)
            | BroadcastCols(a, _)
            | Softmax(a)
            | SoftmaxCrossEntropy(a, _)
            | AvgPool2d(a, _)
            | AvgPool2dAdjoint(a, _)
            | Reshape(a)
            | QuantizeSte(a, _)
            | Quantize(a, _) => vec![*a],
        }
    }

    /// Ops whose output is locally constant in their inputs.
    fn blocks_gradient(&self) -> bool {
        matches!(self, Op::Constant | Op::Step(_) | Op::Sign(_))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Option<Tensor>,
    pub(crate) requires_grad: bool,
}

/// A DAG of differentiable operations, stored in topological order.
///
/// Nodes are evaluated eagerly when all of their parents carry values, so a
/// graph built from bound variables can be read back immediately; graphs
/// built from placeholders are evaluated by [`Graph::forward`]. Gradient
/// rules emit ordinary nodes (see [`Graph::grads_as_nodes`]), which makes
/// gradients themselves differentiable.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
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

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(|n| n.value.as_ref())
    }

    /// Value of a node that is known to be evaluated.
    pub fn expect_value(&self, id: NodeId) -> Result<&Tensor> {
        self.check(id)?;
        self.value(id).ok_or(Error::Unbound(id.0))
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub(crate) fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(id.0))
        }
    }

    pub(crate) fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Differentiable leaf with a bound value.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.leaf(Op::Variable, value.shape().to_vec(), Some(value), true)
    }

    /// Differentiable leaf to be bound by [`Graph::forward`].
    pub fn placeholder(&mut self, shape: &[usize]) -> NodeId {
        self.leaf(Op::Variable, shape.to_vec(), None, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(Op::Constant, value.shape().to_vec(), Some(value), false)
    }

    fn leaf(&mut self, op: Op, shape: Vec<usize>, value: Option<Tensor>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, shape, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, op: Op) -> Result<NodeId> {
        let parents = op.parents();
        for &p in &parents {
            self.check(p)?;
        }
        let shape = self.infer_shape(&op)?;
        self.insert(op, shape)
    }

    fn insert(&mut self, op: Op, shape: Vec<usize>) -> Result<NodeId> {
        let parents = op.parents();
        let requires_grad = !op.blocks_gradient() && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let id = self.nodes.len();
        let ready = parents.iter().all(|p| self.nodes[p.0].value.is_some());
        self.nodes.push(Node { op, shape, value: None, requires_grad });
        if ready {
            match self.evaluate(id) {
                Ok(v) => self.nodes[id].value = Some(v),
                Err(e) => {
                    self.nodes.pop();
                    return Err(e);
                }
            }
        }
        Ok(NodeId(id))
    }

    fn infer_shape(&self, op: &Op) -> Result<Vec<usize>> {
        let sh = |id: &NodeId| self.nodes[id.0].shape.clone();
        let name = op.name();
        let same = |a: &NodeId, b: &NodeId| -> Result<Vec<usize>> {
            let (sa, sb) = (sh(a), sh(b));
            if sa != sb {
                return Err(Error::shape(name, format!("{sa:?} vs {sb:?}")));
            }
            Ok(sa)
        };
        let rank = |id: &NodeId, r: usize| -> Result<Vec<usize>> {
            let s = sh(id);
            if s.len() != r {
                return Err(Error::shape(name, format!("expected rank {r}, got {s:?}")));
            }
            Ok(s)
        };
        use Op::*;
        Ok(match op {
            Variable | Constant => unreachable!("leaves carry their own shape"),
            Add(a, b) | Sub(a, b) | Mul(a, b) => same(a, b)?,
            Neg(a)
            | Scale(a, _)
            | Recip(a)
            | Sqrt(a)
            | Relu(a)
            | Abs(a)
            | Step(a)
            | Sign(a)
            | Softmax(a)
            | QuantizeSte(a, _)
            | Quantize(a, _) => {
                if matches!(op, Softmax(_)) {
                    rank(a, 2)?;
                }
                sh(a)
            }
            Sum(_) | Mean(_) => vec![],
            SoftmaxCrossEntropy(a, labels) => {
                let s = rank(a, 2)?;
                if labels.len() != s[0] {
                    return Err(Error::shape(name, format!("{} labels for {} rows", labels.len(), s[0])));
                }
                if let Some(&bad) = labels.iter().find(|&&y| y >= s[1]) {
                    return Err(Error::shape(name, format!("label {bad} >= {} classes", s[1])));
                }
                vec![]
            }
            Expand(_) | Reshape(_) | Conv2dInputGrad(..) | Conv2dKernelGrad(..) => {
                unreachable!("explicit-shape ops go through push_shaped")
            }
            MatMul(a, b) => {
                let (sa, sb) = (rank(a, 2)?, rank(b, 2)?);
                if sa[1] != sb[0] {
                    return Err(Error::shape(name, format!("{sa:?} x {sb:?}")));
                }
                vec![sa[0], sb[1]]
            }
            Transpose(a) => {
                let s = rank(a, 2)?;
                vec![s[1], s[0]]
            }
            Affine(x, w, b) => {
                let (sx, sw, sb) = (rank(x, 2)?, rank(w, 2)?, rank(b, 1)?);
                if sx[1] != sw[0] || sb[0] != sw[1] {
                    return Err(Error::shape(name, format!("x {sx:?}, W {sw:?}, b {sb:?}")));
                }
                vec![sx[0], sw[1]]
            }
            SumRows(a) => vec![rank(a, 2)?[1]],
            BroadcastRows(a, n) => vec![*n, rank(a, 1)?[0]],
            SumCols(a) => vec![rank(a, 2)?[0]],
            BroadcastCols(a, c) => vec![rank(a, 1)?[0], *c],
            Conv2d(x, k) => {
                let (sx, sk) = (rank(x, 4)?, rank(k, 4)?);
                if sx[1] != sk[1] || sx[2] < sk[2] || sx[3] < sk[3] {
                    return Err(Error::shape(name, format!("input {sx:?}, kernel {sk:?}")));
                }
                vec![sx[0], sk[0], sx[2] - sk[2] + 1, sx[3] - sk[3] + 1]
            }
            AvgPool2d(x, k) => {
                let s = rank(x, 4)?;
                if *k == 0 || s[2] % k != 0 || s[3] % k != 0 {
                    return Err(Error::shape(name, format!("{s:?} not divisible by {k}")));
                }
                vec![s[0], s[1], s[2] / k, s[3] / k]
            }
            AvgPool2dAdjoint(g, k) => {
                let s = rank(g, 4)?;
                vec![s[0], s[1], s[2] * k, s[3] * k]
            }
        })
    }

    /// Push an op whose output shape is given explicitly.
    fn push_shaped(&mut self, op: Op, shape: Vec<usize>) -> Result<NodeId> {
        let parents = op.parents();
        for &p in &parents {
            self.check(p)?;
        }
        let name = op.name();
        let src = |i: usize| self.nodes[parents[i].0].shape.clone();
        match &op {
            Op::Expand(_) if numel(&src(0)) != 1 => {
                return Err(Error::shape(name, format!("source {:?} is not single-element", src(0))));
            }
            Op::Reshape(_) if numel(&src(0)) != numel(&shape) => {
                return Err(Error::shape(name, format!("{:?} -> {shape:?}", src(0))));
            }
            Op::Conv2dInputGrad(..) | Op::Conv2dKernelGrad(..) if src(0).len() != 4 || src(1).len() != 4 => {
                return Err(Error::shape(name, "expected rank-4 operands"));
            }
            _ => {}
        }
        if shape.contains(&0) {
            return Err(Error::shape(name, format!("zero extent in {shape:?}")));
        }
        self.insert(op, shape)
    }

    /// Compute node `id` from its parents' values.
    pub(crate) fn evaluate(&self, id: usize) -> Result<Tensor> {
        let node = &self.nodes[id];
        let v = |p: &NodeId| -> Result<&Tensor> { self.nodes[p.0].value.as_ref().ok_or(Error::Unbound(p.0)) };
        use Op::*;
        let out = match &node.op {
            Variable | Constant => return node.value.clone().ok_or(Error::Unbound(id)),
            Add(a, b) => v(a)?.zip_map(v(b)?, |x, y| x + y)?,
            Sub(a, b) => v(a)?.zip_map(v(b)?, |x, y| x - y)?,
            Mul(a, b) => v(a)?.zip_map(v(b)?, |x, y| x * y)?,
            Neg(a) => v(a)?.map(|x| -x),
            Scale(a, c) => {
                let c = *c;
                v(a)?.map(|x| x * c)
            }
            Recip(a) => v(a)?.map(|x| 1.0 / x),
            Sqrt(a) => v(a)?.map(f64::sqrt),
            Relu(a) => v(a)?.map(|x| if x > 0.0 { x } else { 0.0 }),
            Abs(a) => v(a)?.map(f64::abs),
            Step(a) => v(a)?.map(|x| if x > 0.0 { 1.0 } else { 0.0 }),
            Sign(a) => v(a)?.map(|x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Sum(a) => Tensor::scalar(v(a)?.sum()),
            Mean(a) => {
                let t = v(a)?;
                Tensor::scalar(t.sum() / t.numel() as f64)
            }
            Expand(a) => Tensor::full(&node.shape, v(a)?.item()),
            MatMul(a, b) => kernels::matmul(v(a)?, v(b)?),
            Transpose(a) => kernels::transpose(v(a)?),
            Affine(x, w, b) => kernels::affine(v(x)?, v(w)?, v(b)?),
            SumRows(a) => kernels::sum_rows(v(a)?),
            BroadcastRows(a, n) => kernels::broadcast_rows(v(a)?, *n),
            SumCols(a) => kernels::sum_cols(v(a)?),
            BroadcastCols(a, c) => kernels::broadcast_cols(v(a)?, *c),
            Softmax(a) => kernels::softmax_rows(v(a)?),
            SoftmaxCrossEntropy(a, labels) => Tensor::scalar(kernels::softmax_cross_entropy(v(a)?, labels)),
            Conv2d(x, k) => kernels::conv2d(v(x)?, v(k)?),
            Conv2dInputGrad(g, k) => kernels::conv2d_input_grad(v(g)?, v(k)?, &node.shape),
            Conv2dKernelGrad(x, g) => kernels::conv2d_kernel_grad(v(x)?, v(g)?, &node.shape),
            AvgPool2d(x, k) => kernels::avg_pool2d(v(x)?, *k),
            AvgPool2dAdjoint(g, k) => kernels::avg_pool2d_adjoint(v(g)?, *k),
            Reshape(a) => v(a)?.reshape(&node.shape)?,
            QuantizeSte(a, s) | Quantize(a, s) => crate::quant::quantize(v(a)?, s),
        };
        if !out.is_finite() {
            return Err(Error::NonFinite { op: node.op.name(), node: id });
        }
        Ok(out)
    }

    /// Bind variables and re-evaluate every node; returns the value of `output`.
    pub fn forward(&mut self, bindings: &HashMap<NodeId, Tensor>, output: NodeId) -> Result<Tensor> {
        self.check(output)?;
        for (&id, t) in bindings {
            self.check(id)?;
            let node = &mut self.nodes[id.0];
            if !matches!(node.op, Op::Variable) {
                return Err(Error::InvalidArgument(format!("node {id} is not a variable")));
            }
            if node.shape != t.shape() {
                return Err(Error::shape("bind", format!("variable {id}: {:?} vs {:?}", node.shape, t.shape())));
            }
            node.value = Some(t.clone());
        }
        for i in 0..self.nodes.len() {
            match self.nodes[i].op {
                Op::Variable | Op::Constant => {
                    if self.nodes[i].value.is_none() {
                        return Err(Error::Unbound(i));
                    }
                }
                _ => {
                    let v = self.evaluate(i)?;
                    self.nodes[i].value = Some(v);
                }
            }
        }
        Ok(self.nodes[output.0].value.clone().expect("evaluated above"))
    }

    // Builders ------------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, c))
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Recip(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sqrt(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Abs(a))
    }

    pub fn step(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Step(a))
    }

    pub fn sign(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sign(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(a))
    }

    pub fn expand(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push_shaped(Op::Expand(a), shape.to_vec())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose(a))
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Affine(x, w, b))
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumRows(a))
    }

    pub fn broadcast_rows(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        self.push(Op::BroadcastRows(a, n))
    }

    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumCols(a))
    }

    pub fn broadcast_cols(&mut self, a: NodeId, c: usize) -> Result<NodeId> {
        self.push(Op::BroadcastCols(a, c))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(a))
    }

    /// Mean cross-entropy of row-wise softmax against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.push(Op::SoftmaxCrossEntropy(logits, labels.into()))
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId) -> Result<NodeId> {
        self.push(Op::Conv2d(x, k))
    }

    pub(crate) fn conv2d_input_grad(&mut self, g: NodeId, k: NodeId, x_shape: &[usize]) -> Result<NodeId> {
        self.push_shaped(Op::Conv2dInputGrad(g, k), x_shape.to_vec())
    }

    pub(crate) fn conv2d_kernel_grad(&mut self, x: NodeId, g: NodeId, k_shape: &[usize]) -> Result<NodeId> {
        self.push_shaped(Op::Conv2dKernelGrad(x, g), k_shape.to_vec())
    }

    pub fn avg_pool2d(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        self.push(Op::AvgPool2d(x, k))
    }

    pub(crate) fn avg_pool2d_adjoint(&mut self, g: NodeId, k: usize) -> Result<NodeId> {
        self.push(Op::AvgPool2dAdjoint(g, k))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push_shaped(Op::Reshape(a), shape.to_vec())
    }

    /// Straight-through fake quantization: rounds in the forward pass and
    /// passes the upstream gradient through unchanged.
    pub fn ste_quantize(&mut self, input: NodeId, scheme: QuantScheme) -> Result<NodeId> {
        scheme.validate()?;
        self.push(Op::QuantizeSte(input, scheme))
    }

    /// Hard fake quantization for inference graphs.
    pub fn quantize(&mut self, input: NodeId, scheme: QuantScheme) -> Result<NodeId> {
        scheme.validate()?;
        self.push(Op::Quantize(input, scheme))
    }
}
