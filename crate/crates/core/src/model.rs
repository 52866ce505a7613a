//! Small classifiers expressed as computation graphs.
//!
//! A model builds, for a batch, a graph of the cross-entropy loss whose
//! parameter leaves are variables. The graph also records the tracked
//! activation set: the output of every nonlinearity plus the logits. These
//! are the tensors that get fake-quantized at inference and whose gradients
//! enter the activation part of the gradient penalty.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::quant::{self, QuantScheme};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Mlp,
    TinyConv,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

/// Architecture description.
///
/// For `mlp`, `hidden` lists the hidden-layer widths. For `tiny-conv`,
/// `hidden` lists the channel counts of the two 3x3 convolutions and
/// `input_dim` must be the square of the image side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Self {
        ModelSpec { kind: ModelKind::Mlp, input_dim, hidden: hidden.to_vec(), classes, activation: Activation::Relu }
    }

    pub fn tiny_conv(side: usize, classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::TinyConv,
            input_dim: side * side,
            hidden: vec![8, 16],
            classes,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.hidden.is_empty() {
            return bad("model needs at least one hidden layer".into());
        }
        if self.input_dim == 0 || self.classes < 2 || self.hidden.contains(&0) {
            return bad(format!("widths must be positive and classes >= 2: {self:?}"));
        }
        if self.kind == ModelKind::TinyConv {
            let side = self.side();
            if side * side != self.input_dim {
                return bad(format!("tiny-conv input_dim {} is not a square", self.input_dim));
            }
            if self.hidden.len() != 2 {
                return bad("tiny-conv takes exactly two channel counts".into());
            }
            if side < 6 || !(side - 4).is_multiple_of(2) {
                return bad(format!("tiny-conv needs an even image side >= 6, got {side}"));
            }
        }
        Ok(())
    }

    fn side(&self) -> usize {
        (self.input_dim as f64).sqrt().round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamRole {
    Weight,
    Bias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor,
}

/// Ordered parameter tensors of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub params: Vec<Param>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Indices of weight (non-bias) tensors.
    pub fn weight_indices(&self) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| self.params[i].role == ParamRole::Weight).collect()
    }

    /// Quantize every weight tensor with its own max-abs calibrated scale;
    /// biases stay in floating point. Returns the per-tensor schemes.
    pub fn quantize_weights(&self, bits: u32) -> Result<(ParamSet, Vec<Option<QuantScheme>>)> {
        let mut out = self.clone();
        let mut schemes = Vec::with_capacity(self.len());
        for p in &mut out.params {
            if p.role == ParamRole::Weight {
                let s = quant::calibrate_scale(&p.value, bits)?;
                p.value = quant::quantize(&p.value, &s);
                schemes.push(Some(s));
            } else {
                schemes.push(None);
            }
        }
        Ok((out, schemes))
    }
}

/// How tracked activations are treated while building a graph.
#[derive(Clone, Debug, Default)]
pub enum ActQuant {
    #[default]
    Float,
    /// Derive a max-abs scheme from each activation as it is built, then
    /// quantize it before it feeds the next layer.
    Calibrate(u32),
    /// Hard quantization with fixed schemes.
    Fixed(Vec<QuantScheme>),
    /// Straight-through quantization with fixed schemes.
    Ste(Vec<QuantScheme>),
}

#[derive(Clone, Debug, Default)]
pub struct BuildOptions {
    /// Straight-through weight quantization, one entry per parameter
    /// (`None` leaves the tensor in floating point).
    pub ste_weights: Option<Vec<Option<QuantScheme>>>,
    pub acts: ActQuant,
}

/// A built loss graph with handles to its interesting nodes.
#[derive(Clone, Debug)]
pub struct ModelGraph {
    pub graph: Graph,
    /// Parameter leaves, aligned with [`ParamSet::params`].
    pub params: Vec<NodeId>,
    /// Weight leaves (the set regularized and quantized as weights).
    pub weights: Vec<NodeId>,
    /// Tracked activation outputs, before any activation quantization.
    pub activations: Vec<NodeId>,
    pub logits: NodeId,
    pub loss: Option<NodeId>,
    /// Schemes derived in [`ActQuant::Calibrate`] mode.
    pub act_schemes: Vec<QuantScheme>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Model { spec })
    }

    fn dense_dims(&self) -> Vec<(usize, usize)> {
        match self.spec.kind {
            ModelKind::Mlp => {
                let mut dims = vec![self.spec.input_dim];
                dims.extend(&self.spec.hidden);
                dims.push(self.spec.classes);
                dims.windows(2).map(|w| (w[0], w[1])).collect()
            }
            ModelKind::TinyConv => {
                let side = self.spec.side();
                let pooled = (side - 4) / 2;
                vec![(self.spec.hidden[1] * pooled * pooled, self.spec.classes)]
            }
        }
    }

    /// Parameters drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = seed::labeled_rng(seed, "init");
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::from_parts(shape.to_vec(), data)
        };
        let mut params = Vec::new();
        if self.spec.kind == ModelKind::TinyConv {
            let (c1, c2) = (self.spec.hidden[0], self.spec.hidden[1]);
            params.push(Param {
                name: "conv1.weight".into(),
                role: ParamRole::Weight,
                value: uniform(&[c1, 1, 3, 3], 9),
            });
            params.push(Param {
                name: "conv2.weight".into(),
                role: ParamRole::Weight,
                value: uniform(&[c2, c1, 3, 3], c1 * 9),
            });
        }
        let dense = self.dense_dims();
        for (l, &(fan_in, fan_out)) in dense.iter().enumerate() {
            let prefix = if self.spec.kind == ModelKind::TinyConv { "head".to_string() } else { format!("layer{l}") };
            params.push(Param {
                name: format!("{prefix}.weight"),
                role: ParamRole::Weight,
                value: uniform(&[fan_in, fan_out], fan_in),
            });
            params.push(Param {
                name: format!("{prefix}.bias"),
                role: ParamRole::Bias,
                value: uniform(&[fan_out], fan_in),
            });
        }
        ParamSet { params }
    }

    /// Check that `params` has the layout this model expects.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let reference = self.init_params(0);
        if reference.len() != params.len() {
            return Err(Error::shape("params", format!("expected {} tensors, got {}", reference.len(), params.len())));
        }
        for (r, p) in reference.params.iter().zip(&params.params) {
            if r.value.shape() != p.value.shape() || r.name != p.name {
                return Err(Error::shape(
                    "params",
                    format!("{} {:?} vs {} {:?}", r.name, r.value.shape(), p.name, p.value.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Build the loss graph (or only the logits when `labels` is `None`).
    pub fn build(
        &self,
        params: &ParamSet,
        x: &Tensor,
        labels: Option<&[usize]>,
        opts: &BuildOptions,
    ) -> Result<ModelGraph> {
        self.check_params(params)?;
        if x.shape().len() != 2 || x.shape()[1] != self.spec.input_dim {
            return Err(Error::shape(
                "model input",
                format!("expected [n, {}], got {:?}", self.spec.input_dim, x.shape()),
            ));
        }
        let mut g = Graph::new();
        let param_nodes: Vec<NodeId> = params.params.iter().map(|p| g.variable(p.value.clone())).collect();
        let weights = params.weight_indices().into_iter().map(|i| param_nodes[i]).collect();

        // Effective parameter values seen by the layers.
        let mut eff = param_nodes.clone();
        if let Some(schemes) = &opts.ste_weights {
            if schemes.len() != params.len() {
                return Err(Error::shape(
                    "ste weights",
                    format!("{} schemes for {} params", schemes.len(), params.len()),
                ));
            }
            for (i, s) in schemes.iter().enumerate() {
                if let Some(s) = s {
                    eff[i] = g.ste_quantize(param_nodes[i], *s)?;
                }
            }
        }

        let mut tracker = Tracker { mode: &opts.acts, index: 0, activations: Vec::new(), schemes: Vec::new() };
        let n = x.shape()[0];
        let mut p = eff.into_iter();
        let mut next = || p.next().expect("parameter layout checked");

        let mut h = match self.spec.kind {
            ModelKind::Mlp => g.constant(x.clone()),
            ModelKind::TinyConv => {
                let side = self.spec.side();
                let input = g.constant(x.reshape(&[n, 1, side, side])?);
                let c1 = g.conv2d(input, next())?;
                let a1 = g.relu(c1)?;
                let a1 = tracker.track(&mut g, a1)?;
                let c2 = g.conv2d(a1, next())?;
                let a2 = g.relu(c2)?;
                let a2 = tracker.track(&mut g, a2)?;
                let pooled = g.avg_pool2d(a2, 2)?;
                let flat = numel_tail(g.shape(pooled));
                g.reshape(pooled, &[n, flat])?
            }
        };
        let dense = self.dense_dims();
        for l in 0..dense.len() {
            let (w, b) = (next(), next());
            let z = g.affine(h, w, b)?;
            h = if l + 1 < dense.len() {
                let a = g.relu(z)?;
                tracker.track(&mut g, a)?
            } else {
                z
            };
        }
        // logits are tracked too
        let raw_logits = h;
        let logits = tracker.track(&mut g, raw_logits)?;
        let loss = match labels {
            Some(y) => Some(g.softmax_cross_entropy(logits, y)?),
            None => None,
        };
        Ok(ModelGraph {
            graph: g,
            params: param_nodes,
            weights,
            activations: tracker.activations,
            logits,
            loss,
            act_schemes: tracker.schemes,
        })
    }

    /// Logits for a batch, evaluated in chunks.
    pub fn logits(&self, params: &ParamSet, x: &Tensor, acts: &ActQuant) -> Result<Tensor> {
        const CHUNK: usize = 256;
        let n = x.shape()[0];
        let opts = BuildOptions { ste_weights: None, acts: acts.clone() };
        let mut data = Vec::with_capacity(n * self.spec.classes);
        let mut start = 0;
        while start < n {
            let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
            let mg = self.build(params, &x.select_rows(&idx), None, &opts)?;
            data.extend_from_slice(mg.graph.expect_value(mg.logits)?.data());
            start += CHUNK;
        }
        Tensor::new(vec![n, self.spec.classes], data)
    }

    pub fn probabilities(&self, params: &ParamSet, x: &Tensor, acts: &ActQuant) -> Result<Tensor> {
        Ok(crate::autodiff::kernels::softmax_rows(&self.logits(params, x, acts)?))
    }

    pub fn predict(&self, params: &ParamSet, x: &Tensor, acts: &ActQuant) -> Result<Vec<usize>> {
        let logits = self.logits(params, x, acts)?;
        Ok((0..logits.shape()[0]).map(|i| argmax(logits.row(i))).collect())
    }

    pub fn accuracy(&self, params: &ParamSet, x: &Tensor, labels: &[usize], acts: &ActQuant) -> Result<f64> {
        let pred = self.predict(params, x, acts)?;
        Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
    }

    /// Mean cross-entropy of a batch.
    pub fn loss(&self, params: &ParamSet, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let mg = self.build(params, x, Some(labels), &BuildOptions::default())?;
        Ok(mg.graph.expect_value(mg.loss.expect("labels given"))?.item())
    }

    /// Max-abs activation schemes, calibrated layer by layer on `batch`.
    pub(crate) fn calibrate_activations(
        &self,
        params: &ParamSet,
        batch: &Tensor,
        bits: u32,
    ) -> Result<Vec<QuantScheme>> {
        let opts = BuildOptions { ste_weights: None, acts: ActQuant::Calibrate(bits) };
        Ok(self.build(params, batch, None, &opts)?.act_schemes)
    }
}

fn numel_tail(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

struct Tracker<'a> {
    mode: &'a ActQuant,
    index: usize,
    activations: Vec<NodeId>,
    schemes: Vec<QuantScheme>,
}

impl Tracker<'_> {
    /// Record a tracked activation and return the node the next layer reads.
    fn track(&mut self, g: &mut Graph, node: NodeId) -> Result<NodeId> {
        self.activations.push(node);
        let i = self.index;
        self.index += 1;
        let lookup = |schemes: &[QuantScheme]| {
            schemes
                .get(i)
                .copied()
                .ok_or_else(|| Error::shape("activation schemes", format!("no scheme for tracked activation {i}")))
        };
        match self.mode {
            ActQuant::Float => Ok(node),
            ActQuant::Calibrate(bits) => {
                let value = g.expect_value(node)?;
                let s = quant::calibrate_scale(value, *bits).map_err(|e| match e {
                    Error::DegenerateInput(_) => {
                        Error::DegenerateInput(format!("activation {i} has an all-zero range on the calibration batch"))
                    }
                    other => other,
                })?;
                self.schemes.push(s);
                g.quantize(node, s)
            }
            ActQuant::Fixed(schemes) => {
                let s = lookup(schemes)?;
                g.quantize(node, s)
            }
            ActQuant::Ste(schemes) => {
                let s = lookup(schemes)?;
                g.ste_quantize(node, s)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_two_moons;

    #[test]
    fn parameter_count() {
        let m = Model::new(ModelSpec::mlp(2, &[4], 2)).unwrap();
        assert_eq!(m.init_params(0).count(), 22);
        let m = Model::new(ModelSpec::mlp(2, &[16, 16], 2)).unwrap();
        assert_eq!(m.init_params(0).count(), 2 * 16 + 16 + 16 * 16 + 16 + 16 * 2 + 2);
    }

    #[test]
    fn init_is_seeded() {
        let m = Model::new(ModelSpec::mlp(2, &[8], 2)).unwrap();
        assert_eq!(m.init_params(5), m.init_params(5));
        assert_ne!(m.init_params(5), m.init_params(6));
        let p = m.init_params(5);
        let bound = 1.0 / 2f64.sqrt();
        assert!(p.params[0].value.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn spec_validation() {
        assert!(Model::new(ModelSpec::mlp(2, &[], 2)).is_err());
        assert!(Model::new(ModelSpec::mlp(2, &[0], 2)).is_err());
        assert!(Model::new(ModelSpec { input_dim: 10, ..ModelSpec::tiny_conv(8, 3) }).is_err());
        assert!(Model::new(ModelSpec::tiny_conv(7, 3)).is_err());
        assert!(Model::new(ModelSpec::tiny_conv(8, 3)).is_ok());
    }

    #[test]
    fn untrained_loss_near_ln2() {
        let m = Model::new(ModelSpec::mlp(2, &[16, 16], 2)).unwrap();
        let d = gen_two_moons(400, 0.1, 1).unwrap();
        let loss = m.loss(&m.init_params(3), &d.features, &d.labels).unwrap();
        assert!((loss - 2f64.ln()).abs() < 0.2, "loss {loss}");
    }

    #[test]
    fn softmax_and_cross_entropy_properties() {
        let m = Model::new(ModelSpec::mlp(2, &[8], 3)).unwrap();
        let params = m.init_params(1);
        let d = gen_two_moons(20, 0.1, 1).unwrap();
        let p = m.probabilities(&params, &d.features, &ActQuant::Float).unwrap();
        for i in 0..20 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for i in 0..5 {
            let (x, y) = d.subset(&[i]);
            let ce = m.loss(&params, &x, &y).unwrap();
            assert!(ce >= 0.0);
            assert!((ce + p.row(i)[y[0]].ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn tracked_activations() {
        let m = Model::new(ModelSpec::mlp(2, &[4, 3], 2)).unwrap();
        let d = gen_two_moons(8, 0.1, 1).unwrap();
        let mg = m.build(&m.init_params(0), &d.features, Some(&d.labels), &BuildOptions::default()).unwrap();
        assert_eq!(mg.activations.len(), 3);
        assert_eq!(mg.weights.len(), 3);
        assert_eq!(*mg.activations.last().unwrap(), mg.logits);

        let c = Model::new(ModelSpec::tiny_conv(8, 3)).unwrap();
        let x = Tensor::full(&[2, 64], 0.5);
        let mg = c.build(&c.init_params(0), &x, Some(&[0, 2]), &BuildOptions::default()).unwrap();
        assert_eq!(mg.activations.len(), 3);
        assert_eq!(mg.graph.shape(mg.logits), &[2, 3]);
    }

    #[test]
    fn fake_quantized_weights_match_explicit_grid_model() {
        let m = Model::new(ModelSpec::mlp(2, &[6], 2)).unwrap();
        let params = m.init_params(2);
        let (q, schemes) = params.quantize_weights(4).unwrap();
        // rebuild the same values explicitly as integer levels times scale
        let mut explicit = params.clone();
        for (p, s) in explicit.params.iter_mut().zip(&schemes) {
            if let Some(s) = s {
                p.value = p.value.map(|v| (v / s.scale).round() * s.scale);
            }
        }
        let d = gen_two_moons(10, 0.1, 4).unwrap();
        let a = m.logits(&q, &d.features, &ActQuant::Float).unwrap();
        let b = m.logits(&explicit, &d.features, &ActQuant::Float).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn calibration_single_example_linear_range() {
        let m = Model::new(ModelSpec::mlp(1, &[1], 2)).unwrap();
        let mut p = m.init_params(0);
        p.params[0].value = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        p.params[1].value = Tensor::vector(vec![0.0]);
        let x = Tensor::new(vec![1, 1], vec![1.5]).unwrap();
        let s = quant::activation_ranges(&m, &p, &x, 4).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].scale, 3.0 / 7.0);
    }

    #[test]
    fn calibration_dead_relu_is_degenerate() {
        let m = Model::new(ModelSpec::mlp(1, &[2], 2)).unwrap();
        let mut p = m.init_params(0);
        p.params[0].value = Tensor::new(vec![1, 2], vec![-1.0, -2.0]).unwrap();
        p.params[1].value = Tensor::vector(vec![0.0, 0.0]);
        let x = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let err = quant::activation_ranges(&m, &p, &x, 4).unwrap_err();
        assert!(matches!(err, Error::DegenerateInput(_)));
    }
}
