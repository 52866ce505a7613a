//! Browser demo: train a small two-moons classifier with and without the
//! l1 gradient penalty, then inspect both under quantization.
//!
//! [`Session`] and [`hoeffding_check`] are plain Rust; the `wasm_bindgen`
//! wrappers only convert arguments and errors.

use qrobust::analysis::{monte_carlo_norm_check, noise_histogram, NoiseHistogram};
use qrobust::data::{gen_two_moons, SplitData};
use qrobust::model::{ActQuant, Model, ModelSpec, ParamSet};
use qrobust::quant::{activation_ranges, QuantConfig};
use qrobust::regularizers::{RegConfig, RegFamily};
use qrobust::train::{calibration_batch, evaluate_quantized, TrainConfig, Trainer};
use qrobust::Tensor;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const EPOCHS: usize = 80;
const REG_EPOCHS: usize = 10;

/// Bit-widths shown in the accuracy table.
pub const TABLE_BITS: [(u32, u32); 4] = [(8, 8), (4, 4), (3, 3), (2, 3)];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Plain,
    L1,
}

impl Which {
    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "plain" => Ok(Which::Plain),
            "l1" => Ok(Which::L1),
            _ => Err(format!("unknown model `{s}`, expected `plain` or `l1`")),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AccuracyRow {
    /// `"fp"` or `"w{W}a{A}"`
    pub config: String,
    pub plain: f64,
    pub l1: f64,
}

/// Predicted class on a `resolution x resolution` grid, row-major from the
/// top-left corner.
#[derive(Clone, Debug, Serialize)]
pub struct DecisionGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub resolution: usize,
    pub classes: Vec<u8>,
}

pub struct Session {
    model: Model,
    data: SplitData,
    calib: Tensor,
    plain: ParamSet,
    l1: ParamSet,
}

impl Session {
    /// Train both models from a shared unregularized prefix; only the last
    /// epochs of the `l1` model carry the penalty.
    pub fn train(seed: u64, lambda: f64) -> qrobust::Result<Self> {
        let model = Model::new(ModelSpec::mlp(2, &[16, 16], 2))?;
        let data = gen_two_moons(1000, 0.3, seed)?.split(0.7, 0.15, seed)?;
        let cfg = TrainConfig { epochs: EPOCHS, reg_start_epoch: EPOCHS - REG_EPOCHS, seed, ..Default::default() };
        let mut prefix = Trainer::new(&model, &data, cfg)?;
        prefix.run_until(EPOCHS - REG_EPOCHS)?;
        let plain = prefix.clone().finish()?.params;
        let l1 = prefix.with_reg(RegConfig::new(RegFamily::L1Grad, lambda))?.finish()?.params;
        let calib = calibration_batch(&data.train);
        Ok(Session { model, data, calib, plain, l1 })
    }

    fn params(&self, which: Which) -> &ParamSet {
        match which {
            Which::Plain => &self.plain,
            Which::L1 => &self.l1,
        }
    }

    /// Test-split accuracy in floating point and at [`TABLE_BITS`].
    pub fn accuracies(&self) -> qrobust::Result<Vec<AccuracyRow>> {
        let test = &self.data.test;
        let fp = |p: &ParamSet| self.model.accuracy(p, &test.features, &test.labels, &ActQuant::Float);
        let mut rows = vec![AccuracyRow { config: "fp".into(), plain: fp(&self.plain)?, l1: fp(&self.l1)? }];
        for (w, a) in TABLE_BITS {
            let q = QuantConfig::new(w, a)?;
            rows.push(AccuracyRow {
                config: format!("w{w}a{a}"),
                plain: evaluate_quantized(&self.model, &self.plain, &self.calib, test, q)?,
                l1: evaluate_quantized(&self.model, &self.l1, &self.calib, test, q)?,
            });
        }
        Ok(rows)
    }

    /// Test points as `x, y, label` triples.
    pub fn test_points(&self) -> Vec<f64> {
        let t = &self.data.test;
        (0..t.len()).flat_map(|i| [t.features.row(i)[0], t.features.row(i)[1], t.labels[i] as f64]).collect()
    }

    /// Decision regions, quantized when `q` is given.
    pub fn decision_grid(
        &self,
        which: Which,
        q: Option<QuantConfig>,
        resolution: usize,
    ) -> qrobust::Result<DecisionGrid> {
        let resolution = resolution.clamp(2, 400);
        let (x_min, x_max, y_min, y_max) = (-1.8, 2.8, -1.4, 1.9);
        let mut pts = Vec::with_capacity(2 * resolution * resolution);
        for r in 0..resolution {
            let y = y_max - (y_max - y_min) * r as f64 / (resolution - 1) as f64;
            for c in 0..resolution {
                pts.push(x_min + (x_max - x_min) * c as f64 / (resolution - 1) as f64);
                pts.push(y);
            }
        }
        let x = Tensor::new(vec![resolution * resolution, 2], pts)?;
        let params = self.params(which);
        let pred = match q {
            None => self.model.predict(params, &x, &ActQuant::Float)?,
            Some(q) => {
                let (qp, _) = params.quantize_weights(q.weight_bits)?;
                let schemes = activation_ranges(&self.model, &qp, &self.calib, q.act_bits)?;
                self.model.predict(&qp, &x, &ActQuant::Fixed(schemes))?
            }
        };
        Ok(DecisionGrid {
            x_min,
            x_max,
            y_min,
            y_max,
            resolution,
            classes: pred.into_iter().map(|c| c as u8).collect(),
        })
    }

    pub fn noise_histogram(&self, which: Which, bits: u32, bins: usize) -> qrobust::Result<NoiseHistogram> {
        noise_histogram(self.params(which), bits, bins)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct HoeffdingCheck {
    pub expected: f64,
    pub lower: f64,
    pub upper: f64,
    pub trials: usize,
    pub coverage: f64,
    pub target: f64,
}

/// Interval for `|D|_2^2` with `n` uniform quantization-noise entries of bin
/// width `delta`, and its Monte Carlo coverage.
pub fn hoeffding_check(
    n: usize,
    delta: f64,
    epsilon: f64,
    trials: usize,
    seed: u64,
) -> qrobust::Result<HoeffdingCheck> {
    let r = monte_carlo_norm_check(n, delta, epsilon, trials, seed)?;
    Ok(HoeffdingCheck {
        expected: r.bounds.expected,
        lower: r.bounds.lower(),
        upper: r.bounds.upper(),
        trials: r.trials,
        coverage: r.empirical_coverage,
        target: 1.0 - epsilon,
    })
}

fn js<E: std::fmt::Display>(e: E) -> JsError {
    JsError::new(&e.to_string())
}

fn json<T: Serialize>(v: &T) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(js)
}

/// Bit-width 0 means floating point.
fn quant_arg(weight_bits: u32, act_bits: u32) -> Result<Option<QuantConfig>, JsError> {
    match (weight_bits, act_bits) {
        (0, 0) => Ok(None),
        (w, a) => QuantConfig::new(w, a).map(Some).map_err(js),
    }
}

#[wasm_bindgen]
pub struct Demo {
    session: Session,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, lambda: f64) -> Result<Demo, JsError> {
        Ok(Demo { session: Session::train(seed.into(), lambda).map_err(js)? })
    }

    /// JSON array of `{config, plain, l1}`.
    pub fn accuracies(&self) -> Result<String, JsError> {
        json(&self.session.accuracies().map_err(js)?)
    }

    #[wasm_bindgen(js_name = testPoints)]
    pub fn test_points(&self) -> Vec<f64> {
        self.session.test_points()
    }

    /// JSON `{x_min, x_max, y_min, y_max, resolution, classes}`.
    #[wasm_bindgen(js_name = decisionGrid)]
    pub fn decision_grid(
        &self,
        which: &str,
        weight_bits: u32,
        act_bits: u32,
        resolution: usize,
    ) -> Result<String, JsError> {
        let which = Which::parse(which).map_err(js)?;
        json(&self.session.decision_grid(which, quant_arg(weight_bits, act_bits)?, resolution).map_err(js)?)
    }

    /// JSON of the scaled weight-noise histogram.
    #[wasm_bindgen(js_name = noiseHistogram)]
    pub fn noise_histogram(&self, which: &str, bits: u32, bins: usize) -> Result<String, JsError> {
        let which = Which::parse(which).map_err(js)?;
        json(&self.session.noise_histogram(which, bits, bins).map_err(js)?)
    }
}

/// JSON `{expected, lower, upper, trials, coverage, target}`.
#[wasm_bindgen]
pub fn hoeffding(n: usize, delta: f64, epsilon: f64, trials: usize, seed: u32) -> Result<String, JsError> {
    json(&hoeffding_check(n, delta, epsilon, trials, seed.into()).map_err(js)?)
}
