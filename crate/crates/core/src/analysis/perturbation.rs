use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{ActQuant, BuildOptions, Model, ParamRole, ParamSet};
use crate::quant::{self, QuantConfig};
use crate::seed::Rng;
use crate::tensor::Tensor;

/// `delta * sign(grad)` with `sign(0) = 0`; attains `<D, g> = delta * |g|_1`,
/// the largest first-order term over the `l_inf` ball of radius `delta`.
pub fn worst_case_perturbation(grad: &Tensor, delta: f64) -> Result<Tensor> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArgument(format!("delta must be >= 0, got {delta}")));
    }
    Ok(grad.map(|g| {
        if g > 0.0 {
            delta
        } else if g < 0.0 {
            -delta
        } else {
            0.0
        }
    }))
}

/// Predicted versus actual loss change under a weight perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirstOrderReport {
    /// `sum_l <D_l, grad_W_l L>`
    pub predicted: f64,
    /// `L(w + D) - L(w)`
    pub actual: f64,
    /// `actual - predicted`
    pub residual: f64,
    pub delta_inf_norm: f64,
}

impl FirstOrderReport {
    fn new(predicted: f64, actual: f64, delta: &[Tensor]) -> Self {
        FirstOrderReport {
            predicted,
            actual,
            residual: actual - predicted,
            delta_inf_norm: delta.iter().map(Tensor::norm_inf).fold(0.0, f64::max),
        }
    }
}

fn check_perturbation(weights: &[&Tensor], delta: &[Tensor]) -> Result<()> {
    if weights.len() != delta.len() {
        return Err(Error::shape("perturbation", format!("{} tensors for {} weights", delta.len(), weights.len())));
    }
    for (w, d) in weights.iter().zip(delta) {
        if w.shape() != d.shape() {
            return Err(Error::shape("perturbation", format!("{:?} vs weight {:?}", d.shape(), w.shape())));
        }
    }
    Ok(())
}

/// First-order report for an arbitrary scalar loss built by `build` from
/// variable nodes holding `weights`.
pub fn first_order_report_fn<F>(build: F, weights: &[Tensor], delta: &[Tensor]) -> Result<FirstOrderReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    check_perturbation(&weights.iter().collect::<Vec<_>>(), delta)?;
    let eval = |ws: &[Tensor]| -> Result<(Graph, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let nodes: Vec<NodeId> = ws.iter().map(|w| g.variable(w.clone())).collect();
        let loss = build(&mut g, &nodes)?;
        Ok((g, nodes, loss))
    };
    let (mut g, nodes, loss) = eval(weights)?;
    let base = g.expect_value(loss)?.item();
    let grads = g.backward(loss, &nodes)?;
    let mut predicted = 0.0;
    for (n, d) in nodes.iter().zip(delta) {
        predicted += d.dot(grads.get(*n).expect("requested"))?;
    }
    let moved = weights.iter().zip(delta).map(|(w, d)| w.zip_map(d, |a, b| a + b)).collect::<Result<Vec<_>>>()?;
    let (g2, _, loss2) = eval(&moved)?;
    let actual = g2.expect_value(loss2)?.item() - base;
    Ok(FirstOrderReport::new(predicted, actual, delta))
}

/// First-order report for a model's cross-entropy on one batch, with one
/// perturbation tensor per weight (non-bias) parameter.
pub fn first_order_report(
    model: &Model,
    params: &ParamSet,
    x: &Tensor,
    labels: &[usize],
    delta: &[Tensor],
) -> Result<FirstOrderReport> {
    let widx = params.weight_indices();
    check_perturbation(&widx.iter().map(|&i| &params.params[i].value).collect::<Vec<_>>(), delta)?;
    let mg = model.build(params, x, Some(labels), &BuildOptions::default())?;
    let mut g = mg.graph;
    let loss = mg.loss.expect("labels given");
    let base = g.expect_value(loss)?.item();
    let grads = g.backward(loss, &mg.weights)?;
    let mut predicted = 0.0;
    for (n, d) in mg.weights.iter().zip(delta) {
        predicted += d.dot(grads.get(*n).expect("requested"))?;
    }
    let mut moved = params.clone();
    for (&i, d) in widx.iter().zip(delta) {
        moved.params[i].value = moved.params[i].value.zip_map(d, |a, b| a + b)?;
    }
    let actual = model.loss(&moved, x, labels)? - base;
    Ok(FirstOrderReport::new(predicted, actual, delta))
}

/// Actual quantization noise of every weight tensor at `bits`.
pub fn quantization_noise(params: &ParamSet, bits: u32) -> Result<Vec<Tensor>> {
    params
        .params
        .iter()
        .filter(|p| p.role == ParamRole::Weight)
        .map(|p| Ok(quant::quant_noise(&p.value, &quant::calibrate_scale(&p.value, bits)?)))
        .collect()
}

/// Fresh `U(-s/2, s/2)` noise per weight tensor, where `s` is the tensor's
/// calibrated scale at `bits`.
pub fn uniform_noise(params: &ParamSet, bits: u32, rng: &mut Rng) -> Result<Vec<Tensor>> {
    params
        .params
        .iter()
        .filter(|p| p.role == ParamRole::Weight)
        .map(|p| {
            let half = quant::calibrate_scale(&p.value, bits)?.scale / 2.0;
            let data = (0..p.value.numel()).map(|_| rng.random_range(-half..=half)).collect();
            Tensor::new(p.value.shape().to_vec(), data)
        })
        .collect()
}

/// First-order reports for fresh quantization-scale noise on each batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseResponse {
    pub bits: u32,
    pub reports: Vec<FirstOrderReport>,
    /// Pearson correlation of predicted and actual loss changes.
    pub correlation: f64,
}

/// Draw [`uniform_noise`] at `bits` for every batch and compare the
/// first-order prediction with the actual loss change on that batch.
pub fn noise_response(
    model: &Model,
    params: &ParamSet,
    batches: &[(Tensor, Vec<usize>)],
    bits: u32,
    seed: u64,
) -> Result<NoiseResponse> {
    if batches.len() < 2 {
        return Err(Error::InvalidArgument("need at least two batches".into()));
    }
    let mut rng = crate::seed::labeled_rng(seed, "noise-response");
    let mut reports = Vec::with_capacity(batches.len());
    for (x, y) in batches {
        let delta = uniform_noise(params, bits, &mut rng)?;
        reports.push(first_order_report(model, params, x, y, &delta)?);
    }
    let pred: Vec<f64> = reports.iter().map(|r| r.predicted).collect();
    let actual: Vec<f64> = reports.iter().map(|r| r.actual).collect();
    let correlation = super::stats::pearson(&pred, &actual)?;
    Ok(NoiseResponse { bits, reports, correlation })
}

/// Mean `KL(p || q)` between the floating-point and quantized predictive
/// distributions. `q` is floored at `1e-12` inside the logarithm; `None`
/// disables quantization.
pub fn kl_fp_vs_quantized(
    model: &Model,
    params: &ParamSet,
    calib: &Tensor,
    x: &Tensor,
    q: Option<QuantConfig>,
) -> Result<f64> {
    let p = model.probabilities(params, x, &ActQuant::Float)?;
    let qd = match q {
        None => p.clone(),
        Some(q) => {
            let (qp, _) = params.quantize_weights(q.weight_bits)?;
            let schemes = model.calibrate_activations(&qp, calib, q.act_bits)?;
            model.probabilities(&qp, x, &ActQuant::Fixed(schemes))?
        }
    };
    let n = p.shape()[0];
    let mut total = 0.0;
    for i in 0..n {
        for (&pi, &qi) in p.row(i).iter().zip(qd.row(i)) {
            if pi > 0.0 {
                total += pi * (pi.ln() - qi.max(1e-12).ln());
            }
        }
    }
    Ok(total / n as f64)
}

/// Norms of one batch's concatenated weight and activation gradients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradNorms {
    pub l1: f64,
    pub l2: f64,
    /// Number of concatenated entries.
    pub n: usize,
}

/// Per-batch `l1` and `l2` norms of the cross-entropy gradient with respect
/// to all weight tensors and tracked activations.
pub fn grad_norm_stats(model: &Model, params: &ParamSet, batches: &[(Tensor, Vec<usize>)]) -> Result<Vec<GradNorms>> {
    if batches.is_empty() {
        return Err(Error::InvalidArgument("need at least one batch".into()));
    }
    batches
        .iter()
        .map(|(x, y)| {
            let mg = model.build(params, x, Some(y), &BuildOptions::default())?;
            let mut g = mg.graph;
            let wrt: Vec<NodeId> = mg.weights.iter().chain(&mg.activations).copied().collect();
            let bundle = g.backward(mg.loss.expect("labels given"), &wrt)?;
            let n = bundle.iter().map(|(_, t)| t.numel()).sum();
            Ok(GradNorms { l1: bundle.norm_l1(), l2: bundle.norm_l2(), n })
        })
        .collect()
}
