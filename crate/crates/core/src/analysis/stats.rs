use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamRole, ParamSet};
use crate::quant;

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need two equal-length series of >= 2 values, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateInput("correlation of a constant series".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Kolmogorov-Smirnov distance between the empirical distribution of
/// `samples` and `U(-0.5, 0.5)`.
pub fn ks_uniform(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let cdf = |v: f64| (v + 0.5).clamp(0.0, 1.0);
    s.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Normalized histogram of `noise / scale` pooled over all weight tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseHistogram {
    /// `bins + 1` edges spanning `[-0.5, 0.5]`.
    pub edges: Vec<f64>,
    /// Probability density per bin (integrates to the in-range mass).
    pub density: Vec<f64>,
    /// Fraction of values outside `[-0.5, 0.5]`.
    pub outside_mass: f64,
    pub count: usize,
    pub ks_distance: f64,
}

impl NoiseHistogram {
    /// `lo,hi,density` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lo,hi,density\n");
        for (i, d) in self.density.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", self.edges[i], self.edges[i + 1], d);
        }
        out
    }
}

/// Scaled quantization noise of every weight tensor at `bits`.
pub fn scaled_weight_noise(params: &ParamSet, bits: u32) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for p in params.params.iter().filter(|p| p.role == ParamRole::Weight) {
        let s = quant::calibrate_scale(&p.value, bits)?;
        out.extend(quant::quant_noise(&p.value, &s).data().iter().map(|v| v / s.scale));
    }
    Ok(out)
}

pub fn noise_histogram(params: &ParamSet, bits: u32, bins: usize) -> Result<NoiseHistogram> {
    if bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    let values = scaled_weight_noise(params, bits)?;
    let mut counts = vec![0usize; bins];
    let mut outside = 0usize;
    for &v in &values {
        if !(-0.5..=0.5).contains(&v) {
            outside += 1;
            continue;
        }
        let b = (((v + 0.5) * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let n = values.len() as f64;
    let width = 1.0 / bins as f64;
    Ok(NoiseHistogram {
        edges: (0..=bins).map(|i| -0.5 + i as f64 * width).collect(),
        density: counts.iter().map(|&c| c as f64 / n / width).collect(),
        outside_mass: outside as f64 / n,
        count: values.len(),
        ks_distance: ks_uniform(&values),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelSpec};

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ks_of_grid_is_small() {
        let v: Vec<f64> = (0..1000).map(|i| -0.5 + (i as f64 + 0.5) / 1000.0).collect();
        assert!(ks_uniform(&v) <= 0.0005 + 1e-12);
        assert!((ks_uniform(&[0.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn weights_on_grid_give_a_spike_at_zero() {
        let m = Model::new(ModelSpec::mlp(2, &[8], 2)).unwrap();
        let (q, _) = m.init_params(0).quantize_weights(4).unwrap();
        let h = noise_histogram(&q, 4, 10).unwrap();
        assert_eq!(h.outside_mass, 0.0);
        let total: f64 = h.density.iter().map(|d| d * 0.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
        // the two bins adjacent to zero hold everything
        assert!((h.density[4] + h.density[5]) * 0.1 > 1.0 - 1e-12);
    }
}
