//! Gradient-norm penalties and the orthogonality baselines.
//!
//! The gradient penalties are built on top of gradient nodes emitted by
//! [`Graph::grads_as_nodes`], so the penalty is an ordinary scalar node
//! that can be differentiated again with respect to the weights.
//!
//! Weight tensors are turned into layer matrices with output channels as
//! rows: dense weights are stored `[in, out]` and are transposed, conv
//! kernels `[out, in, kh, kw]` are flattened to `[out, in*kh*kw]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

/// Guard for the square root in the `l2` penalty.
pub const L2_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegFamily {
    L1Grad,
    L2Grad,
    DqOrtho,
    DqTrace,
    #[default]
    None,
}

impl RegFamily {
    pub fn is_gradient_penalty(self) -> bool {
        matches!(self, RegFamily::L1Grad | RegFamily::L2Grad)
    }

    pub fn is_dq(self) -> bool {
        matches!(self, RegFamily::DqOrtho | RegFamily::DqTrace)
    }
}

impl std::fmt::Display for RegFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegFamily::L1Grad => "l1-grad",
            RegFamily::L2Grad => "l2-grad",
            RegFamily::DqOrtho => "dq-ortho",
            RegFamily::DqTrace => "dq-trace",
            RegFamily::None => "none",
        })
    }
}

/// Penalty family and strengths. The DQ families use `lambda_w` only.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegConfig {
    #[serde(default)]
    pub family: RegFamily,
    #[serde(default)]
    pub lambda_w: f64,
    #[serde(default)]
    pub lambda_y: f64,
}

impl RegConfig {
    pub fn none() -> Self {
        RegConfig::default()
    }

    /// `family` with `lambda_w = lambda_y = lambda`.
    pub fn new(family: RegFamily, lambda: f64) -> Self {
        RegConfig { family, lambda_w: lambda, lambda_y: lambda }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_w", self.lambda_w), ("lambda_y", self.lambda_y)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.family != RegFamily::None
            && (self.lambda_w > 0.0 || (self.family.is_gradient_penalty() && self.lambda_y > 0.0))
    }
}

fn expect_family(cfg: &RegConfig, family: RegFamily) -> Result<()> {
    cfg.validate()?;
    if cfg.family != family {
        return Err(Error::InvalidArgument(format!("expected a {family} config, got {}", cfg.family)));
    }
    Ok(())
}

/// `lambda_w * sum_l |grad_W_l L|_1 + lambda_y * sum_l |grad_y_l L|_1` as a
/// differentiable node.
pub fn l1_grad_penalty(
    graph: &mut Graph,
    loss: NodeId,
    weights: &[NodeId],
    activations: &[NodeId],
    cfg: &RegConfig,
) -> Result<NodeId> {
    expect_family(cfg, RegFamily::L1Grad)?;
    let grads = gradient_nodes(graph, loss, weights, activations, cfg)?;
    grad_penalty_from_nodes(graph, &grads, cfg)
}

/// Same as [`l1_grad_penalty`] with guarded Euclidean norms
/// `sqrt(|g|^2 + eps^2) - eps` per tensor.
pub fn l2_grad_penalty(
    graph: &mut Graph,
    loss: NodeId,
    weights: &[NodeId],
    activations: &[NodeId],
    cfg: &RegConfig,
) -> Result<NodeId> {
    expect_family(cfg, RegFamily::L2Grad)?;
    let grads = gradient_nodes(graph, loss, weights, activations, cfg)?;
    grad_penalty_from_nodes(graph, &grads, cfg)
}

/// Gradient nodes of the loss, split into weight and activation parts.
pub struct GradNodes {
    pub weights: Vec<NodeId>,
    pub activations: Vec<NodeId>,
}

fn gradient_nodes(
    graph: &mut Graph,
    loss: NodeId,
    weights: &[NodeId],
    activations: &[NodeId],
    cfg: &RegConfig,
) -> Result<GradNodes> {
    let w: &[NodeId] = if cfg.lambda_w > 0.0 { weights } else { &[] };
    let y: &[NodeId] = if cfg.lambda_y > 0.0 { activations } else { &[] };
    let wrt: Vec<NodeId> = w.iter().chain(y).copied().collect();
    let mut nodes = graph.grads_as_nodes(loss, &wrt)?;
    let acts = nodes.split_off(w.len());
    Ok(GradNodes { weights: nodes, activations: acts })
}

/// Build the gradient penalty of `cfg` from already emitted gradient nodes.
/// Terms whose strength is zero are skipped.
pub fn grad_penalty_from_nodes(graph: &mut Graph, grads: &GradNodes, cfg: &RegConfig) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for (nodes, lambda) in [(&grads.weights, cfg.lambda_w), (&grads.activations, cfg.lambda_y)] {
        if lambda == 0.0 || nodes.is_empty() {
            continue;
        }
        let mut term: Option<NodeId> = None;
        for &g in nodes.iter() {
            let norm = match cfg.family {
                RegFamily::L1Grad => {
                    let a = graph.abs(g)?;
                    graph.sum(a)?
                }
                RegFamily::L2Grad => guarded_l2(graph, g)?,
                other => return Err(Error::InvalidArgument(format!("{other} is not a gradient penalty"))),
            };
            term = Some(match term {
                None => norm,
                Some(t) => graph.add(t, norm)?,
            });
        }
        let scaled = graph.scale(term.expect("non-empty"), lambda)?;
        total = Some(match total {
            None => scaled,
            Some(t) => graph.add(t, scaled)?,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => graph.constant(Tensor::scalar(0.0)),
    })
}

fn guarded_l2(graph: &mut Graph, g: NodeId) -> Result<NodeId> {
    let sq = graph.mul(g, g)?;
    let s = graph.sum(sq)?;
    let eps2 = graph.constant(Tensor::scalar(L2_EPS * L2_EPS));
    let s = graph.add(s, eps2)?;
    let r = graph.sqrt(s)?;
    let eps = graph.constant(Tensor::scalar(L2_EPS));
    graph.sub(r, eps)
}

/// Numeric value of a gradient penalty given the loss gradients.
pub fn grad_penalty_value(weight_grads: &[&Tensor], act_grads: &[&Tensor], cfg: &RegConfig) -> f64 {
    let norm = |t: &Tensor| match cfg.family {
        RegFamily::L1Grad => t.norm_l1(),
        RegFamily::L2Grad => (t.norm_l2().powi(2) + L2_EPS * L2_EPS).sqrt() - L2_EPS,
        _ => 0.0,
    };
    let part = |ts: &[&Tensor], lambda: f64| {
        if lambda == 0.0 {
            0.0
        } else {
            lambda * ts.iter().map(|t| norm(t)).sum::<f64>()
        }
    };
    part(weight_grads, cfg.lambda_w) + part(act_grads, cfg.lambda_y)
}

/// Layer matrix of a model weight tensor (rows are output channels).
pub fn layer_matrix(weight: &Tensor) -> Result<Tensor> {
    match weight.shape().len() {
        2 => Ok(crate::autodiff::kernels::transpose(weight)),
        4 => {
            let s = weight.shape();
            weight.reshape(&[s[0], s[1] * s[2] * s[3]])
        }
        _ => Err(Error::shape("layer matrix", format!("unsupported weight shape {:?}", weight.shape()))),
    }
}

/// Treat a rank-2 tensor as a layer matrix and flatten a rank-4 kernel.
fn as_matrix(w: &Tensor) -> Result<Tensor> {
    match w.shape().len() {
        2 => Ok(w.clone()),
        4 => layer_matrix(w),
        _ => Err(Error::shape("dq penalty", format!("expected a matrix or kernel, got {:?}", w.shape()))),
    }
}

fn sum_sq(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum()
}

fn gram_minus_identity(m: &Tensor) -> Tensor {
    let mt = crate::autodiff::kernels::transpose(m);
    let mut gram = crate::autodiff::kernels::matmul(&mt, m);
    let c = m.shape()[1];
    for i in 0..c {
        gram.data_mut()[i * c + i] -= 1.0;
    }
    gram
}

/// `lambda * sum_l |M_l^T M_l - I|_F^2` over layer matrices.
pub fn dq_ortho_penalty(matrices: &[Tensor], lambda: f64) -> Result<f64> {
    let mut total = 0.0;
    for w in matrices {
        total += sum_sq(&gram_minus_identity(&as_matrix(w)?));
    }
    Ok(lambda * total)
}

/// `lambda * sum_l Tr(M_l^T M_l - I) = lambda * sum_l (|M_l|_F^2 - cols_l)`.
pub fn dq_trace_penalty(matrices: &[Tensor], lambda: f64) -> Result<f64> {
    let mut total = 0.0;
    for w in matrices {
        let m = as_matrix(w)?;
        total += sum_sq(&m) - m.shape()[1] as f64;
    }
    Ok(lambda * total)
}

/// Layer matrices of model weight nodes, as graph nodes.
fn layer_matrix_node(graph: &mut Graph, w: NodeId) -> Result<NodeId> {
    let s = graph.shape(w).to_vec();
    match s.len() {
        2 => graph.transpose(w),
        4 => graph.reshape(w, &[s[0], s[1] * s[2] * s[3]]),
        _ => Err(Error::shape("layer matrix", format!("unsupported weight shape {s:?}"))),
    }
}

/// DQ penalty of model weight nodes as a differentiable node.
pub fn dq_penalty_node(graph: &mut Graph, weights: &[NodeId], cfg: &RegConfig) -> Result<NodeId> {
    cfg.validate()?;
    let mut total: Option<NodeId> = None;
    for &w in weights {
        let m = layer_matrix_node(graph, w)?;
        let cols = graph.shape(m)[1];
        let term = match cfg.family {
            RegFamily::DqOrtho => {
                let mt = graph.transpose(m)?;
                let gram = graph.matmul(mt, m)?;
                let eye = graph.constant(Tensor::eye(cols));
                let d = graph.sub(gram, eye)?;
                let sq = graph.mul(d, d)?;
                graph.sum(sq)?
            }
            RegFamily::DqTrace => {
                let sq = graph.mul(m, m)?;
                let s = graph.sum(sq)?;
                let c = graph.constant(Tensor::scalar(cols as f64));
                graph.sub(s, c)?
            }
            other => return Err(Error::InvalidArgument(format!("{other} is not a DQ penalty"))),
        };
        total = Some(match total {
            None => term,
            Some(t) => graph.add(t, term)?,
        });
    }
    match total {
        Some(t) => graph.scale(t, cfg.lambda_w),
        None => Ok(graph.constant(Tensor::scalar(0.0))),
    }
}

/// `(|W^T W - I|_F^2, sum_i (sigma_i^2 - 1)^2 + max(0, cols - rows))`.
///
/// When `W` has fewer rows than columns, `W^T W` has `cols - rows` extra
/// zero eigenvalues, each contributing 1 to the left side.
pub fn singular_value_identity_check(w: &Tensor) -> Result<(f64, f64)> {
    if w.shape().len() != 2 {
        return Err(Error::shape("singular value identity", format!("expected a matrix, got {:?}", w.shape())));
    }
    let lhs = sum_sq(&gram_minus_identity(w));
    let sigma = linalg::singular_values(w)?;
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let rhs = sigma.iter().map(|s| (s * s - 1.0).powi(2)).sum::<f64>() + cols.saturating_sub(rows) as f64;
    Ok((lhs, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(v: &[f64]) -> Tensor {
        let n = v.len();
        let mut t = Tensor::zeros(&[n, n]);
        for (i, &x) in v.iter().enumerate() {
            t.data_mut()[i * n + i] = x;
        }
        t
    }

    #[test]
    fn l1_penalty_of_linear_loss() {
        // L = <w, x>: grad_w L = x
        let mut g = Graph::new();
        let w = g.variable(Tensor::vector(vec![0.3, -1.0, 2.0]));
        let x = g.constant(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let p = g.mul(w, x).unwrap();
        let loss = g.sum(p).unwrap();
        let cfg = RegConfig { family: RegFamily::L1Grad, lambda_w: 0.5, lambda_y: 0.0 };
        let pen = l1_grad_penalty(&mut g, loss, &[w], &[], &cfg).unwrap();
        assert_eq!(g.expect_value(pen).unwrap().item(), 0.5 * 3.5);

        let cfg = RegConfig { family: RegFamily::L2Grad, lambda_w: 1.0, lambda_y: 0.0 };
        let pen = l2_grad_penalty(&mut g, loss, &[w], &[], &cfg).unwrap();
        assert!((g.expect_value(pen).unwrap().item() - 5.25f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn zero_strength_gives_zero() {
        let mut g = Graph::new();
        let w = g.variable(Tensor::vector(vec![1.0, 2.0]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        let pen = l1_grad_penalty(&mut g, loss, &[w], &[], &RegConfig::new(RegFamily::L1Grad, 0.0)).unwrap();
        assert_eq!(g.expect_value(pen).unwrap().item(), 0.0);
        let grads = g.backward(pen, &[w]).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn l2_penalty_of_zero_gradient() {
        let mut g = Graph::new();
        let w = g.variable(Tensor::vector(vec![0.0, 0.0]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        let pen = l2_grad_penalty(&mut g, loss, &[w], &[], &RegConfig::new(RegFamily::L2Grad, 1.0)).unwrap();
        assert_eq!(g.expect_value(pen).unwrap().item(), 0.0);
        let grads = g.backward(pen, &[w]).unwrap();
        assert!(grads.get(w).unwrap().is_finite());
    }

    #[test]
    fn family_mismatch_is_rejected() {
        let mut g = Graph::new();
        let w = g.variable(Tensor::scalar(1.0));
        assert!(l1_grad_penalty(&mut g, w, &[w], &[], &RegConfig::new(RegFamily::L2Grad, 1.0)).is_err());
        assert!(RegConfig::new(RegFamily::L1Grad, -1.0).validate().is_err());
        assert!(RegConfig::new(RegFamily::L1Grad, f64::NAN).validate().is_err());
    }

    #[test]
    fn dq_examples() {
        assert_eq!(dq_ortho_penalty(&[Tensor::eye(3)], 1.0).unwrap(), 0.0);
        assert_eq!(dq_ortho_penalty(&[diag(&[2.0, 2.0, 2.0, 2.0])], 1.0).unwrap(), 36.0);
        assert_eq!(dq_ortho_penalty(&[diag(&[2.0, 1.0])], 1.0).unwrap(), 9.0);
        assert_eq!(dq_trace_penalty(&[Tensor::eye(3)], 1.0).unwrap(), 0.0);
        assert_eq!(dq_trace_penalty(&[diag(&[2.0, 1.0])], 1.0).unwrap(), 3.0);
        assert_eq!(dq_trace_penalty(&[diag(&[2.0, 1.0])], 2.0).unwrap(), 6.0);
    }

    #[test]
    fn dq_node_matches_numeric() {
        let w = Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, 0.1, 0.0, 0.7]).unwrap();
        let k = Tensor::new(vec![2, 1, 2, 2], vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8]).unwrap();
        let mats = [layer_matrix(&w).unwrap(), layer_matrix(&k).unwrap()];
        for family in [RegFamily::DqOrtho, RegFamily::DqTrace] {
            let mut g = Graph::new();
            let nodes = [g.variable(w.clone()), g.variable(k.clone())];
            let cfg = RegConfig::new(family, 0.3);
            let node = dq_penalty_node(&mut g, &nodes, &cfg).unwrap();
            let expected = match family {
                RegFamily::DqOrtho => dq_ortho_penalty(&mats, 0.3).unwrap(),
                _ => dq_trace_penalty(&mats, 0.3).unwrap(),
            };
            assert!((g.expect_value(node).unwrap().item() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_check_examples() {
        assert_eq!(singular_value_identity_check(&Tensor::eye(4)).unwrap(), (0.0, 0.0));
        let (l, r) = singular_value_identity_check(&diag(&[2.0, 1.0])).unwrap();
        assert_eq!(l, 9.0);
        assert!((r - 9.0).abs() < 1e-12);
        // wide matrix: W^T W is 3x3 with one zero eigenvalue
        let wide = Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let (l, r) = singular_value_identity_check(&wide).unwrap();
        assert_eq!(l, 2.0);
        assert!((r - 2.0).abs() < 1e-12);
    }
}
