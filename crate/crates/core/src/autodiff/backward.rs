//! Reverse-mode differentiation by graph extension.
//!
//! Every vector-Jacobian rule below is written in terms of graph ops, so the
//! gradient nodes it emits can be differentiated again. Ops that are locally
//! constant (`step`, `sign`) contribute nothing, which gives `|x|` and `relu`
//! a zero derivative at the origin and a zero second derivative elsewhere.

use std::collections::BTreeMap;

use super::graph::{Graph, NodeId, Op};
use super::kernels;
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Gradients of a scalar output, keyed by node.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientBundle {
    grads: BTreeMap<NodeId, Tensor>,
}

impl GradientBundle {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<NodeId, Tensor> {
        self.grads
    }

    /// Sum of `|g|` over all gradients in the bundle.
    pub fn norm_l1(&self) -> f64 {
        self.grads.values().map(Tensor::norm_l1).sum()
    }

    /// Euclidean norm of all gradients concatenated.
    pub fn norm_l2(&self) -> f64 {
        self.grads.values().map(|t| t.norm_l2().powi(2)).sum::<f64>().sqrt()
    }
}

impl Graph {
    /// Exact gradients of the scalar `output` with respect to `wrt`.
    ///
    /// `wrt` may name intermediate nodes as well as leaves. Nodes without a
    /// path to the output get a zero gradient. The graph is left unchanged.
    pub fn backward(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<GradientBundle> {
        self.backward_with_seed(output, wrt, 1.0)
    }

    pub fn backward_with_seed(&mut self, output: NodeId, wrt: &[NodeId], seed: f64) -> Result<GradientBundle> {
        let len = self.len();
        let result = self.backward_inner(output, wrt, seed);
        self.truncate(len);
        result
    }

    fn backward_inner(&mut self, output: NodeId, wrt: &[NodeId], seed: f64) -> Result<GradientBundle> {
        for &w in wrt {
            self.check(w)?;
        }
        self.expect_value(output)?;
        let seed = self.scalar_seed(output, seed)?;
        let map = self.gradient_map(output, seed)?;
        let mut grads = BTreeMap::new();
        for &w in wrt {
            let g = match map.get(w.0).copied().flatten() {
                Some(g) => self.expect_value(g)?.clone(),
                None => Tensor::zeros(self.shape(w)),
            };
            grads.insert(w, g);
        }
        Ok(GradientBundle { grads })
    }

    /// Extend the graph with a node computing `d output / d wrt`.
    pub fn grad_as_node(&mut self, output: NodeId, wrt: NodeId) -> Result<NodeId> {
        Ok(self.grads_as_nodes(output, &[wrt])?[0])
    }

    /// Extend the graph with gradient nodes for several targets in one
    /// reverse sweep. The emitted nodes are differentiable.
    pub fn grads_as_nodes(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        for &w in wrt {
            self.check(w)?;
        }
        let seed = self.scalar_seed(output, 1.0)?;
        let map = self.gradient_map(output, seed)?;
        wrt.iter()
            .map(|&w| match map.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let shape = self.shape(w).to_vec();
                    Ok(self.constant(Tensor::zeros(&shape)))
                }
            })
            .collect()
    }

    fn scalar_seed(&mut self, output: NodeId, seed: f64) -> Result<NodeId> {
        self.check(output)?;
        let shape = self.shape(output).to_vec();
        if numel(&shape) != 1 {
            return Err(Error::NotScalar { node: output.0, shape });
        }
        Ok(self.constant(Tensor::full(&shape, seed)))
    }

    /// Reverse sweep from `output`; entry `i` holds the gradient node of node `i`.
    fn gradient_map(&mut self, output: NodeId, seed: NodeId) -> Result<Vec<Option<NodeId>>> {
        let mut grads: Vec<Option<NodeId>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (parent, contrib) in self.vjp(NodeId(i), &op, g)? {
                grads[parent.0] = Some(match grads[parent.0] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }
        Ok(grads)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Vector-Jacobian products of node `y = op(..)` for upstream gradient `g`.
    fn vjp(&mut self, y: NodeId, op: &Op, g: NodeId) -> Result<Vec<(NodeId, NodeId)>> {
        let mut out = Vec::with_capacity(3);
        use Op::*;
        match op {
            Variable | Constant | Step(_) | Sign(_) => {}
            Add(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g));
                }
                if self.needs(*b) {
                    out.push((*b, g));
                }
            }
            Sub(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g));
                }
                if self.needs(*b) {
                    out.push((*b, self.neg(g)?));
                }
            }
            Mul(a, b) => {
                if self.needs(*a) {
                    out.push((*a, self.mul(g, *b)?));
                }
                if self.needs(*b) {
                    out.push((*b, self.mul(g, *a)?));
                }
            }
            Neg(a) => out.push((*a, self.neg(g)?)),
            Scale(a, c) => out.push((*a, self.scale(g, *c)?)),
            Recip(a) => {
                // d(1/a) = -(1/a)^2
                let sq = self.mul(y, y)?;
                let t = self.mul(g, sq)?;
                out.push((*a, self.neg(t)?));
            }
            Sqrt(a) => {
                let r = self.recip(y)?;
                let t = self.mul(g, r)?;
                out.push((*a, self.scale(t, 0.5)?));
            }
            Relu(a) => {
                let mask = self.step(*a)?;
                out.push((*a, self.mul(g, mask)?));
            }
            Abs(a) => {
                let s = self.sign(*a)?;
                out.push((*a, self.mul(g, s)?));
            }
            Sum(a) => {
                let shape = self.shape(*a).to_vec();
                out.push((*a, self.expand(g, &shape)?));
            }
            Mean(a) => {
                let shape = self.shape(*a).to_vec();
                let scaled = self.scale(g, 1.0 / numel(&shape) as f64)?;
                out.push((*a, self.expand(scaled, &shape)?));
            }
            Expand(a) => {
                let shape = self.shape(*a).to_vec();
                let s = self.sum(g)?;
                let s = if shape.is_empty() { s } else { self.reshape(s, &shape)? };
                out.push((*a, s));
            }
            MatMul(a, b) => {
                if self.needs(*a) {
                    let bt = self.transpose(*b)?;
                    out.push((*a, self.matmul(g, bt)?));
                }
                if self.needs(*b) {
                    let at = self.transpose(*a)?;
                    out.push((*b, self.matmul(at, g)?));
                }
            }
            Transpose(a) => out.push((*a, self.transpose(g)?)),
            Affine(x, w, b) => {
                if self.needs(*x) {
                    let wt = self.transpose(*w)?;
                    out.push((*x, self.matmul(g, wt)?));
                }
                if self.needs(*w) {
                    let xt = self.transpose(*x)?;
                    out.push((*w, self.matmul(xt, g)?));
                }
                if self.needs(*b) {
                    out.push((*b, self.sum_rows(g)?));
                }
            }
            SumRows(a) => {
                let n = self.shape(*a)[0];
                out.push((*a, self.broadcast_rows(g, n)?));
            }
            BroadcastRows(a, _) => out.push((*a, self.sum_rows(g)?)),
            SumCols(a) => {
                let c = self.shape(*a)[1];
                out.push((*a, self.broadcast_cols(g, c)?));
            }
            BroadcastCols(a, _) => out.push((*a, self.sum_cols(g)?)),
            Softmax(a) => {
                // s * (g - rowsum(s * g))
                let c = self.shape(*a)[1];
                let sg = self.mul(y, g)?;
                let rs = self.sum_cols(sg)?;
                let rs = self.broadcast_cols(rs, c)?;
                let centered = self.sub(g, rs)?;
                out.push((*a, self.mul(y, centered)?));
            }
            SoftmaxCrossEntropy(z, labels) => {
                // g * (softmax(z) - onehot) / n
                let shape = self.shape(*z).to_vec();
                let p = self.softmax(*z)?;
                let target = self.constant(kernels::one_hot(labels, shape[1]));
                let diff = self.sub(p, target)?;
                let diff = self.scale(diff, 1.0 / shape[0] as f64)?;
                let ge = self.expand(g, &shape)?;
                out.push((*z, self.mul(ge, diff)?));
            }
            Conv2d(x, k) => {
                if self.needs(*x) {
                    let xs = self.shape(*x).to_vec();
                    out.push((*x, self.conv2d_input_grad(g, *k, &xs)?));
                }
                if self.needs(*k) {
                    let ks = self.shape(*k).to_vec();
                    out.push((*k, self.conv2d_kernel_grad(*x, g, &ks)?));
                }
            }
            Conv2dInputGrad(up, k) => {
                // bilinear in (up, k): <h, A(up, k)> = <conv(h, k), up> = <k, Kgrad(h, up)>
                if self.needs(*up) {
                    out.push((*up, self.conv2d(g, *k)?));
                }
                if self.needs(*k) {
                    let ks = self.shape(*k).to_vec();
                    out.push((*k, self.conv2d_kernel_grad(g, *up, &ks)?));
                }
            }
            Conv2dKernelGrad(x, up) => {
                // <h, Kgrad(x, up)> = <conv(x, h), up> = <x, A(up, h)>
                if self.needs(*up) {
                    out.push((*up, self.conv2d(*x, g)?));
                }
                if self.needs(*x) {
                    let xs = self.shape(*x).to_vec();
                    out.push((*x, self.conv2d_input_grad(*up, g, &xs)?));
                }
            }
            AvgPool2d(a, k) => out.push((*a, self.avg_pool2d_adjoint(g, *k)?)),
            AvgPool2dAdjoint(a, k) => out.push((*a, self.avg_pool2d(g, *k)?)),
            Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                out.push((*a, self.reshape(g, &shape)?));
            }
            QuantizeSte(a, _) => out.push((*a, g)),
            Quantize(..) => return Err(Error::MissingRule(op.name())),
        }
        Ok(out)
    }
}
