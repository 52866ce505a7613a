//! Uniform symmetric fake quantization.
//!
//! A [`QuantScheme`] places values on the grid `k * scale` with
//! `|k| <= 2^(bits-1) - 1`. The grid step `scale` is the bin width, so the
//! rounding error of any in-range value is at most `scale / 2`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantScheme {
    pub bits: u32,
    pub scale: f64,
    pub zero_point: f64,
    pub symmetric: bool,
}

impl QuantScheme {
    pub fn symmetric(bits: u32, scale: f64) -> Result<Self> {
        let s = QuantScheme { bits, scale, zero_point: 0.0, symmetric: true };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=31).contains(&self.bits) {
            return Err(Error::InvalidScheme(format!("bits must be in 2..=31, got {}", self.bits)));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidScheme(format!("scale must be positive, got {}", self.scale)));
        }
        if !self.symmetric || self.zero_point != 0.0 {
            return Err(Error::InvalidScheme("only symmetric schemes with zero_point 0".into()));
        }
        Ok(())
    }

    /// Largest grid index, `2^(bits-1) - 1`.
    pub fn max_level(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }

    /// Bin width of the grid.
    pub fn delta(&self) -> f64 {
        self.scale
    }

    #[inline]
    pub fn quantize_value(&self, x: f64) -> f64 {
        let m = self.max_level() as f64;
        // f64::round rounds half away from zero.
        (x / self.scale).round().clamp(-m, m) * self.scale
    }

    pub fn is_on_grid(&self, x: f64) -> bool {
        let k = x / self.scale;
        (k - k.round()).abs() <= 1e-9 && k.round().abs() <= self.max_level() as f64
    }
}

/// Weight / activation bit-widths of one post-training configuration.
/// Serialized as the string `"weight_bits,act_bits"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct QuantConfig {
    pub weight_bits: u32,
    pub act_bits: u32,
}

impl QuantConfig {
    pub fn new(weight_bits: u32, act_bits: u32) -> Result<Self> {
        for b in [weight_bits, act_bits] {
            if !(2..=16).contains(&b) {
                return Err(Error::InvalidArgument(format!("bit-width {b} outside 2..=16")));
            }
        }
        Ok(QuantConfig { weight_bits, act_bits })
    }
}

impl fmt::Display for QuantConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.weight_bits, self.act_bits)
    }
}

impl FromStr for QuantConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("expected `weight_bits,act_bits`, got `{s}`"));
        let (w, a) = s.split_once(',').ok_or_else(bad)?;
        let w = w.trim().parse().map_err(|_| bad())?;
        let a = a.trim().parse().map_err(|_| bad())?;
        QuantConfig::new(w, a)
    }
}

impl TryFrom<String> for QuantConfig {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<QuantConfig> for String {
    fn from(q: QuantConfig) -> String {
        q.to_string()
    }
}

/// Symmetric max-abs calibration: `scale = max|x| / (2^(bits-1) - 1)`.
pub fn calibrate_scale(x: &Tensor, bits: u32) -> Result<QuantScheme> {
    calibrate_from_max(x.norm_inf(), bits)
}

pub(crate) fn calibrate_from_max(max_abs: f64, bits: u32) -> Result<QuantScheme> {
    if !(2..=31).contains(&bits) {
        return Err(Error::InvalidScheme(format!("bits must be in 2..=31, got {bits}")));
    }
    if max_abs == 0.0 || !max_abs.is_finite() {
        return Err(Error::DegenerateInput(format!("cannot calibrate a scale from max |x| = {max_abs}")));
    }
    QuantScheme::symmetric(bits, max_abs / ((1i64 << (bits - 1)) - 1) as f64)
}

pub fn quantize(x: &Tensor, s: &QuantScheme) -> Tensor {
    x.map(|v| s.quantize_value(v))
}

/// `quantize(x, s) - x`.
pub fn quant_noise(x: &Tensor, s: &QuantScheme) -> Tensor {
    x.map(|v| s.quantize_value(v) - v)
}

/// Per-tracked-activation schemes from the max-abs range observed on a
/// calibration batch, with weights left in floating point.
///
/// Layers are calibrated in order; each scheme is derived from the
/// activation that the quantized earlier layers produce.
pub fn activation_ranges(model: &Model, params: &ParamSet, batch: &Tensor, bits: u32) -> Result<Vec<QuantScheme>> {
    if batch.numel() == 0 || batch.shape()[0] == 0 {
        return Err(Error::DegenerateInput("empty calibration batch".into()));
    }
    model.calibrate_activations(params, batch, bits)
}
