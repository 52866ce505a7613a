//! SGD training with late-epoch regularization, lambda grid search,
//! straight-through fine-tuning and post-training quantized evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::data::{Dataset, SplitData};
use crate::error::{Error, Result};
use crate::model::{ActQuant, BuildOptions, Model, ParamRole, ParamSet};
use crate::quant::{QuantConfig, QuantScheme};
use crate::regularizers::{self, GradNodes, RegConfig, RegFamily};
use crate::seed;
use crate::tensor::Tensor;

/// Largest calibration batch.
pub const CALIBRATION_SIZE: usize = 256;

/// Tolerance on FP validation accuracy used by [`lambda_grid_search`].
pub const GRID_TOLERANCE: f64 = 0.005;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Epochs at which the learning rate is multiplied by `lr_gamma`.
    #[serde(default)]
    pub lr_milestones: Vec<usize>,
    #[serde(default = "default_lr_gamma")]
    pub lr_gamma: f64,
    #[serde(default)]
    pub reg: RegConfig,
    /// First epoch (0-based) whose updates include the penalty.
    #[serde(default)]
    pub reg_start_epoch: usize,
    #[serde(default)]
    pub seed: u64,
    /// Configurations evaluated on the validation split after every epoch.
    #[serde(default)]
    pub quant_eval: Vec<QuantConfig>,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    1e-4
}

fn default_lr_gamma() -> f64 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            lr_milestones: Vec::new(),
            lr_gamma: default_lr_gamma(),
            reg: RegConfig::none(),
            reg_start_epoch: 185,
            seed: 0,
            quant_eval: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.reg_start_epoch > self.epochs {
            return bad(format!("reg_start_epoch {} exceeds epochs {}", self.reg_start_epoch, self.epochs));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma.is_finite()) {
            return bad(format!("lr_gamma must be > 0, got {}", self.lr_gamma));
        }
        self.reg.validate()
    }

    /// Step-decayed learning rate of `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let steps = self.lr_milestones.iter().filter(|&&m| m <= epoch).count();
        self.learning_rate * self.lr_gamma.powi(steps as i32)
    }

    fn penalty_active(&self, epoch: usize) -> bool {
        epoch >= self.reg_start_epoch && self.reg.is_active()
    }

    fn weight_decay_at(&self, epoch: usize) -> f64 {
        if self.reg.family.is_dq() && self.penalty_active(epoch) {
            0.0
        } else {
            self.weight_decay
        }
    }
}

/// Per-epoch training summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's batches.
    pub train_loss: f64,
    /// Mean penalty value over the epoch's batches, computed whether or not
    /// it affects the updates.
    pub penalty: f64,
    /// Validation accuracy in floating point.
    pub fp_accuracy: f64,
    /// Validation accuracy per configured quantization.
    pub quant_accuracy: Vec<(QuantConfig, f64)>,
    /// Mean over batches of the `l1` / `l2` norm of all weight and tracked
    /// activation gradients of the cross-entropy, concatenated.
    pub mean_grad_l1: f64,
    pub mean_grad_l2: f64,
}

/// Render metrics as CSV.
///
/// Header: `epoch,train_loss,penalty,fp_accuracy,mean_grad_l1,mean_grad_l2`
/// followed by one `acc_w{W}a{A}` column per quantized configuration.
pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from("epoch,train_loss,penalty,fp_accuracy,mean_grad_l1,mean_grad_l2");
    if let Some(first) = records.first() {
        for (q, _) in &first.quant_accuracy {
            let _ = write!(out, ",acc_w{}a{}", q.weight_bits, q.act_bits);
        }
    }
    out.push('\n');
    for r in records {
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            r.epoch, r.train_loss, r.penalty, r.fp_accuracy, r.mean_grad_l1, r.mean_grad_l2
        );
        for (_, a) in &r.quant_accuracy {
            let _ = write!(out, ",{a}");
        }
        out.push('\n');
    }
    out
}

/// Calibration batch: the first training examples, at most
/// [`CALIBRATION_SIZE`] of them.
pub fn calibration_batch(train: &Dataset) -> Tensor {
    train.head(CALIBRATION_SIZE.min(train.len())).0
}

/// Result of a training or fine-tuning run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub metrics: Vec<MetricsRecord>,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Weight schemes of a straight-through fine-tuned model.
    pub schemes: Option<Vec<Option<QuantScheme>>>,
}

/// Resumable SGD state.
#[derive(Clone, Debug)]
pub struct Trainer<'a> {
    model: &'a Model,
    data: &'a SplitData,
    cfg: TrainConfig,
    params: ParamSet,
    velocity: Vec<Tensor>,
    epoch: usize,
    metrics: Vec<MetricsRecord>,
    ste_target: Option<QuantConfig>,
}

struct StepStats {
    loss: f64,
    penalty: f64,
    grad_l1: f64,
    grad_l2: f64,
}

impl<'a> Trainer<'a> {
    /// Start from the model's seeded initialization.
    pub fn new(model: &'a Model, data: &'a SplitData, cfg: TrainConfig) -> Result<Self> {
        let params = model.init_params(seed::derive_seed(cfg.seed, "init"));
        Self::from_params(model, data, cfg, params)
    }

    pub fn from_params(model: &'a Model, data: &'a SplitData, cfg: TrainConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        model.check_params(&params)?;
        if data.train.dim() != model.spec.input_dim {
            return Err(Error::shape(
                "training data",
                format!("features have {} columns, model expects {}", data.train.dim(), model.spec.input_dim),
            ));
        }
        let velocity = params.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Ok(Trainer { model, data, cfg, params, velocity, epoch: 0, metrics: Vec::new(), ste_target: None })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn metrics(&self) -> &[MetricsRecord] {
        &self.metrics
    }

    /// Replace the penalty configuration; used to branch several runs from a
    /// shared unregularized prefix.
    pub fn with_reg(mut self, reg: RegConfig) -> Result<Self> {
        self.cfg.reg = reg;
        self.cfg.validate()?;
        Ok(self)
    }

    /// Run epochs until `epoch` (exclusive) or the configured total.
    pub fn run_until(&mut self, epoch: usize) -> Result<()> {
        let end = epoch.min(self.cfg.epochs);
        while self.epoch < end {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<TrainOutcome> {
        self.run_until(self.cfg.epochs)?;
        let schemes = match self.ste_target {
            Some(q) => Some(self.params.quantize_weights(q.weight_bits)?.1),
            None => None,
        };
        Ok(TrainOutcome { params: self.params, metrics: self.metrics, epoch: self.epoch, schemes })
    }

    fn run_epoch(&mut self) -> Result<()> {
        let epoch = self.epoch;
        let train = &self.data.train;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seed::labeled_rng(self.cfg.seed, &format!("shuffle/{epoch}")));

        let act_schemes = match self.ste_target {
            Some(q) => {
                let (qp, _) = self.params.quantize_weights(q.weight_bits)?;
                Some(self.model.calibrate_activations(&qp, &calibration_batch(train), q.act_bits)?)
            }
            None => None,
        };

        let mut totals = StepStats { loss: 0.0, penalty: 0.0, grad_l1: 0.0, grad_l2: 0.0 };
        let batches: Vec<&[usize]> = order.chunks(self.cfg.batch_size).collect();
        for (b, idx) in batches.iter().enumerate() {
            let (x, y) = train.subset(idx);
            let stats = self.step(&x, &y, act_schemes.as_deref()).map_err(|e| match e {
                Error::NonFinite { op, node } => Error::Divergence {
                    epoch,
                    batch: b,
                    detail: format!("non-finite value from `{op}` at node {node}"),
                },
                other => other,
            })?;
            if !stats.loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: b, detail: format!("loss {}", stats.loss) });
            }
            totals.loss += stats.loss;
            totals.penalty += stats.penalty;
            totals.grad_l1 += stats.grad_l1;
            totals.grad_l2 += stats.grad_l2;
        }
        let nb = batches.len() as f64;
        let val = &self.data.val;
        let fp_accuracy = self.model.accuracy(&self.params, &val.features, &val.labels, &ActQuant::Float)?;
        let calib = calibration_batch(train);
        let quant_accuracy = self
            .cfg
            .quant_eval
            .iter()
            .map(|&q| Ok((q, evaluate_quantized(self.model, &self.params, &calib, val, q)?)))
            .collect::<Result<Vec<_>>>()?;
        self.metrics.push(MetricsRecord {
            epoch,
            train_loss: totals.loss / nb,
            penalty: totals.penalty / nb,
            fp_accuracy,
            quant_accuracy,
            mean_grad_l1: totals.grad_l1 / nb,
            mean_grad_l2: totals.grad_l2 / nb,
        });
        self.epoch += 1;
        Ok(())
    }

    fn step(&mut self, x: &Tensor, y: &[usize], act_schemes: Option<&[QuantScheme]>) -> Result<StepStats> {
        let epoch = self.epoch;
        let opts = match self.ste_target {
            Some(q) => BuildOptions {
                ste_weights: Some(self.params.quantize_weights(q.weight_bits)?.1),
                acts: ActQuant::Ste(act_schemes.expect("calibrated per epoch").to_vec()),
            },
            None => BuildOptions::default(),
        };
        let mg = self.model.build(&self.params, x, Some(y), &opts)?;
        let mut g = mg.graph;
        let loss = mg.loss.expect("labels given");

        // One sweep for all parameters and tracked activations.
        let wrt: Vec<NodeId> = mg.params.iter().chain(&mg.activations).copied().collect();
        let ce = g.grads_as_nodes(loss, &wrt)?;
        let (param_grads, act_grads) = ce.split_at(mg.params.len());
        let weight_idx = self.params.weight_indices();
        let weight_grads: Vec<NodeId> = weight_idx.iter().map(|&i| param_grads[i]).collect();

        let (mut l1, mut sq) = (0.0, 0.0);
        for &n in weight_grads.iter().chain(act_grads) {
            let t = g.expect_value(n)?;
            l1 += t.norm_l1();
            sq += t.norm_l2().powi(2);
        }

        let reg = self.cfg.reg;
        let active = self.cfg.penalty_active(epoch);
        let (penalty, updates) = if active {
            let pen = match reg.family {
                RegFamily::L1Grad | RegFamily::L2Grad => {
                    let grads = GradNodes {
                        weights: if reg.lambda_w > 0.0 { weight_grads.clone() } else { Vec::new() },
                        activations: if reg.lambda_y > 0.0 { act_grads.to_vec() } else { Vec::new() },
                    };
                    regularizers::grad_penalty_from_nodes(&mut g, &grads, &reg)?
                }
                RegFamily::DqOrtho | RegFamily::DqTrace => regularizers::dq_penalty_node(&mut g, &mg.weights, &reg)?,
                RegFamily::None => unreachable!("inactive"),
            };
            let penalty = g.expect_value(pen)?.item();
            let total = g.add(loss, pen)?;
            let bundle = g.backward(total, &mg.params)?;
            let updates: Vec<Tensor> = mg.params.iter().map(|&p| bundle.get(p).expect("requested").clone()).collect();
            (penalty, updates)
        } else {
            let penalty = self.penalty_value(&g, &weight_grads, act_grads)?;
            let updates = param_grads.iter().map(|&n| g.expect_value(n).cloned()).collect::<Result<Vec<Tensor>>>()?;
            (penalty, updates)
        };

        let loss_value = g.expect_value(loss)?.item();
        self.apply(updates, self.cfg.weight_decay_at(epoch))?;
        Ok(StepStats { loss: loss_value, penalty, grad_l1: l1, grad_l2: sq.sqrt() })
    }

    fn penalty_value(&self, g: &Graph, weight_grads: &[NodeId], act_grads: &[NodeId]) -> Result<f64> {
        let reg = &self.cfg.reg;
        match reg.family {
            RegFamily::None => Ok(0.0),
            RegFamily::L1Grad | RegFamily::L2Grad => {
                let w = weight_grads.iter().map(|&n| g.expect_value(n)).collect::<Result<Vec<_>>>()?;
                let a = act_grads.iter().map(|&n| g.expect_value(n)).collect::<Result<Vec<_>>>()?;
                Ok(regularizers::grad_penalty_value(&w, &a, reg))
            }
            RegFamily::DqOrtho | RegFamily::DqTrace => {
                let mats = layer_matrices(&self.params)?;
                if reg.family == RegFamily::DqOrtho {
                    regularizers::dq_ortho_penalty(&mats, reg.lambda_w)
                } else {
                    regularizers::dq_trace_penalty(&mats, reg.lambda_w)
                }
            }
        }
    }

    fn apply(&mut self, grads: Vec<Tensor>, weight_decay: f64) -> Result<()> {
        let (lr, mu) = (self.cfg.learning_rate_at(self.epoch), self.cfg.momentum);
        for ((p, v), g) in self.params.params.iter_mut().zip(&mut self.velocity).zip(grads) {
            let w = p.value.data_mut();
            for ((wi, vi), gi) in w.iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = mu * *vi + gi + weight_decay * *wi;
                *wi -= lr * *vi;
            }
            if !p.value.is_finite() {
                return Err(Error::Divergence {
                    epoch: self.epoch,
                    batch: 0,
                    detail: format!("parameter {} became non-finite", p.name),
                });
            }
        }
        Ok(())
    }
}

/// Layer matrices of all weight tensors (see [`regularizers::layer_matrix`]).
pub fn layer_matrices(params: &ParamSet) -> Result<Vec<Tensor>> {
    params.params.iter().filter(|p| p.role == ParamRole::Weight).map(|p| regularizers::layer_matrix(&p.value)).collect()
}

/// Train from the seeded initialization for `cfg.epochs` epochs.
pub fn train(model: &Model, data: &SplitData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(model, data, cfg.clone())?.finish()
}

/// Post-training quantization accuracy: weights quantized per tensor with
/// calibrated scales, activations quantized with schemes calibrated on
/// `calib`, accuracy measured on `eval`.
pub fn evaluate_quantized(
    model: &Model,
    params: &ParamSet,
    calib: &Tensor,
    eval: &Dataset,
    q: QuantConfig,
) -> Result<f64> {
    let (qp, _) = params.quantize_weights(q.weight_bits)?;
    let schemes = model.calibrate_activations(&qp, calib, q.act_bits)?;
    model.accuracy(&qp, &eval.features, &eval.labels, &ActQuant::Fixed(schemes))
}

/// Straight-through quantization-aware fine-tuning at `target`.
///
/// Weight scales are recalibrated from the shadow weights at every step and
/// activation scales once per epoch on the calibration batch. `cfg.epochs`
/// fine-tuning epochs are run; any penalty in `cfg.reg` is ignored.
pub fn ste_finetune(
    model: &Model,
    params: &ParamSet,
    data: &SplitData,
    target: QuantConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig { reg: RegConfig::none(), reg_start_epoch: 0, ..cfg.clone() };
    let mut t = Trainer::from_params(model, data, cfg, params.clone())?;
    t.ste_target = Some(target);
    t.finish()
}

/// Accuracy of a straight-through model trained at `target`, evaluated at
/// `q`. Above the target width both re-quantizing the shadow weights and
/// re-using the target-quantized weights are tried and the better is kept.
pub fn evaluate_ste(
    model: &Model,
    shadow: &ParamSet,
    target: QuantConfig,
    calib: &Tensor,
    eval: &Dataset,
    q: QuantConfig,
) -> Result<f64> {
    let requant = evaluate_quantized(model, shadow, calib, eval, q)?;
    if q.weight_bits <= target.weight_bits {
        return Ok(requant);
    }
    let (truncated, _) = shadow.quantize_weights(target.weight_bits)?;
    Ok(requant.max(evaluate_quantized(model, &truncated, calib, eval, q)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub lambda: f64,
    pub fp_accuracy: f64,
    pub train_loss: f64,
    pub penalty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub chosen: f64,
    /// FP validation accuracy of the unregularized run.
    pub baseline_accuracy: f64,
    pub entries: Vec<GridEntry>,
    pub warning: Option<String>,
}

/// Select the largest `lambda` whose FP validation accuracy stays within
/// [`GRID_TOLERANCE`] of the unregularized run. Quantized accuracy is never
/// consulted. All runs share the unregularized prefix before
/// `cfg.reg_start_epoch`.
pub fn lambda_grid_search(
    model: &Model,
    data: &SplitData,
    candidates: &[f64],
    family: RegFamily,
    cfg: &TrainConfig,
) -> Result<GridReport> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("grid search needs at least one candidate".into()));
    }
    let base_cfg = TrainConfig { reg: RegConfig::none(), ..cfg.clone() };
    let mut prefix = Trainer::new(model, data, base_cfg)?;
    prefix.run_until(cfg.reg_start_epoch)?;

    let run = |lambda: f64| -> Result<GridEntry> {
        let reg = if lambda == 0.0 { RegConfig::none() } else { RegConfig::new(family, lambda) };
        let out = prefix.clone().with_reg(reg)?.finish()?;
        let last = out.metrics.last();
        Ok(GridEntry {
            lambda,
            fp_accuracy: model.accuracy(&out.params, &data.val.features, &data.val.labels, &ActQuant::Float)?,
            train_loss: last.map_or(f64::NAN, |m| m.train_loss),
            penalty: last.map_or(0.0, |m| m.penalty),
        })
    };
    let mut lambdas: Vec<f64> = candidates.to_vec();
    if !lambdas.contains(&0.0) {
        lambdas.push(0.0);
    }
    let results = map_maybe_parallel(&lambdas, run)?;
    let baseline = results.iter().find(|e| e.lambda == 0.0).expect("baseline included").fp_accuracy;
    let entries: Vec<GridEntry> = results.into_iter().filter(|e| candidates.contains(&e.lambda)).collect();

    let ok = entries.iter().filter(|e| e.fp_accuracy >= baseline - GRID_TOLERANCE).map(|e| e.lambda);
    let (chosen, warning) = match ok.fold(None, |m: Option<f64>, l| Some(m.map_or(l, |m| m.max(l)))) {
        Some(l) => (l, None),
        None => {
            let smallest = candidates.iter().copied().fold(f64::INFINITY, f64::min);
            (
                smallest,
                Some(format!("every candidate lowers FP accuracy by more than {GRID_TOLERANCE}; using {smallest}")),
            )
        }
    };
    Ok(GridReport { chosen, baseline_accuracy: baseline, entries, warning })
}

#[cfg(feature = "parallel")]
pub(crate) fn map_maybe_parallel<T: Copy + Sync, R: Send>(
    items: &[T],
    f: impl Fn(T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    use rayon::prelude::*;
    items.par_iter().map(|&t| f(t)).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_maybe_parallel<T: Copy + Sync, R: Send>(
    items: &[T],
    f: impl Fn(T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    items.iter().map(|&t| f(t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_two_moons;
    use crate::model::ModelSpec;

    fn setup() -> (Model, SplitData) {
        let model = Model::new(ModelSpec::mlp(2, &[8], 2)).unwrap();
        let data = gen_two_moons(200, 0.1, 1).unwrap().split(0.7, 0.15, 1).unwrap();
        (model, data)
    }

    fn short(reg: RegConfig, epochs: usize, start: usize) -> TrainConfig {
        TrainConfig { epochs, batch_size: 32, learning_rate: 0.1, reg, reg_start_epoch: start, ..Default::default() }
    }

    #[test]
    fn zero_epochs_returns_initial_weights() {
        let (model, data) = setup();
        let cfg = short(RegConfig::none(), 0, 0);
        let out = train(&model, &data, &cfg).unwrap();
        assert_eq!(out.params, model.init_params(seed::derive_seed(0, "init")));
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let (model, data) = setup();
        let cfg = TrainConfig {
            quant_eval: vec![QuantConfig::new(4, 4).unwrap()],
            ..short(RegConfig::new(RegFamily::L1Grad, 0.01), 4, 2)
        };
        let a = train(&model, &data, &cfg).unwrap();
        let b = train(&model, &data, &cfg).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn penalty_does_not_affect_updates_before_start() {
        let (model, data) = setup();
        for family in [RegFamily::L1Grad, RegFamily::L2Grad, RegFamily::DqOrtho, RegFamily::DqTrace] {
            let reg = RegConfig::new(family, 0.05);
            let mut a = Trainer::new(&model, &data, short(reg, 5, 3)).unwrap();
            let mut b = Trainer::new(&model, &data, short(RegConfig::none(), 5, 3)).unwrap();
            a.run_until(3).unwrap();
            b.run_until(3).unwrap();
            assert_eq!(a.params(), b.params());
            assert!(a.metrics().iter().all(|m| m.penalty != 0.0));
            a.run_until(5).unwrap();
            b.run_until(5).unwrap();
            assert_ne!(a.params(), b.params());
        }
    }

    #[test]
    fn reported_penalty_matches_node_value() {
        // the numeric penalty used before the start epoch equals the node
        // value used after it, on the same parameters
        let (model, data) = setup();
        let reg = RegConfig::new(RegFamily::L1Grad, 0.1);
        let params = model.init_params(4);
        let (x, y) = data.train.head(32);
        let mg = model.build(&params, &x, Some(&y), &BuildOptions::default()).unwrap();
        let mut g = mg.graph;
        let loss = mg.loss.unwrap();
        let pen = regularizers::l1_grad_penalty(&mut g, loss, &mg.weights, &mg.activations, &reg).unwrap();
        let node_value = g.expect_value(pen).unwrap().item();
        let bundle = g.backward(loss, &[mg.weights.clone(), mg.activations.clone()].concat()).unwrap();
        let w: Vec<&Tensor> = mg.weights.iter().map(|&n| bundle.get(n).unwrap()).collect();
        let a: Vec<&Tensor> = mg.activations.iter().map(|&n| bundle.get(n).unwrap()).collect();
        assert!((regularizers::grad_penalty_value(&w, &a, &reg) - node_value).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { reg_start_epoch: 300, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn quantization_disabled_is_plain_accuracy() {
        let (model, data) = setup();
        let params = model.init_params(2);
        let plain = model.accuracy(&params, &data.test.features, &data.test.labels, &ActQuant::Float).unwrap();
        let calib = calibration_batch(&data.train);
        let q16 = evaluate_quantized(&model, &params, &calib, &data.test, QuantConfig::new(16, 16).unwrap()).unwrap();
        assert!((plain - q16).abs() <= 0.02);
    }

    #[test]
    fn grid_with_only_zero() {
        let (model, data) = setup();
        let r = lambda_grid_search(&model, &data, &[0.0], RegFamily::L1Grad, &short(RegConfig::none(), 3, 2)).unwrap();
        assert_eq!(r.chosen, 0.0);
        assert!(r.warning.is_none());
    }

    #[test]
    fn ste_shadow_weights_move() {
        let (model, data) = setup();
        let params = model.init_params(1);
        let cfg = short(RegConfig::none(), 1, 0);
        let out = ste_finetune(&model, &params, &data, QuantConfig::new(3, 4).unwrap(), &cfg).unwrap();
        for (a, b) in out.params.params.iter().zip(&params.params) {
            assert_ne!(a.value, b.value, "{} did not move", a.name);
        }
        assert_eq!(out.schemes.unwrap().iter().filter(|s| s.is_some()).count(), 2);
    }

    #[test]
    fn csv_header() {
        let r = MetricsRecord {
            epoch: 0,
            train_loss: 0.5,
            penalty: 0.0,
            fp_accuracy: 1.0,
            quant_accuracy: vec![(QuantConfig::new(8, 4).unwrap(), 0.75)],
            mean_grad_l1: 1.0,
            mean_grad_l2: 0.5,
        };
        let csv = metrics_csv(&[r]);
        assert_eq!(
            csv,
            "epoch,train_loss,penalty,fp_accuracy,mean_grad_l1,mean_grad_l2,acc_w8a4\n0,0.5,0,1,1,0.5,0.75\n"
        );
    }
}
