use std::fmt::Write as _;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax, ActQuant, Model, ParamSet};
use crate::seed;
use crate::tensor::Tensor;

const MAX_DRAWS: usize = 32;

/// Class and confidence over a square grid spanned by two orthonormal
/// input-space directions through a dataset example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossSection {
    pub center: usize,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    pub radius: f64,
    pub resolution: usize,
    /// Row-major `resolution x resolution`; row index moves along `d1`.
    pub classes: Vec<usize>,
    pub max_prob: Vec<f64>,
}

impl CrossSection {
    /// Grid coordinate of index `i` in `[-radius, radius]`.
    pub fn coord(&self, i: usize) -> f64 {
        grid_coord(self.radius, self.resolution, i)
    }

    pub fn center_class(&self) -> usize {
        let mid = self.resolution / 2;
        self.classes[mid * self.resolution + mid]
    }

    /// Fraction of grid points sharing the class of the grid center.
    pub fn same_class_fraction(&self) -> f64 {
        let c = self.center_class();
        self.classes.iter().filter(|&&k| k == c).count() as f64 / self.classes.len() as f64
    }

    /// `a,b,class,max_prob` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("a,b,class,max_prob\n");
        for i in 0..self.resolution {
            for j in 0..self.resolution {
                let k = i * self.resolution + j;
                let _ = writeln!(out, "{},{},{},{}", self.coord(i), self.coord(j), self.classes[k], self.max_prob[k]);
            }
        }
        out
    }
}

fn grid_coord(radius: f64, resolution: usize, i: usize) -> f64 {
    let span = (resolution - 1) as f64;
    radius * (2.0 * i as f64 - span) / span
}

#[derive(Clone, Debug)]
pub struct CrossSectionOptions {
    /// Defaults to five times the dataset's feature standard deviation.
    pub radius: Option<f64>,
    pub resolution: usize,
    pub seed: u64,
    pub acts: ActQuant,
}

impl Default for CrossSectionOptions {
    fn default() -> Self {
        CrossSectionOptions { radius: None, resolution: 201, seed: 0, acts: ActQuant::Float }
    }
}

fn orthonormal_pair(dim: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rng = seed::labeled_rng(seed, "cross-section");
    let mut draw = || -> Vec<f64> { (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let normalize = |v: &mut Vec<f64>| -> bool {
        let n = dot(v, v).sqrt();
        if n < 1e-8 {
            return false;
        }
        v.iter_mut().for_each(|x| *x /= n);
        true
    };
    for _ in 0..MAX_DRAWS {
        let mut a = draw();
        if !normalize(&mut a) {
            continue;
        }
        let mut b = draw();
        let p = dot(&a, &b);
        b.iter_mut().zip(&a).for_each(|(x, y)| *x -= p * y);
        // second pass for orthogonality to round-off
        let p = dot(&a, &b);
        b.iter_mut().zip(&a).for_each(|(x, y)| *x -= p * y);
        if normalize(&mut b) {
            return Ok((a, b));
        }
    }
    Err(Error::DegenerateInput(format!("no independent directions after {MAX_DRAWS} draws")))
}

/// Evaluate the model on `center + a d1 + b d2` over a square grid.
pub fn decision_cross_section(
    model: &Model,
    params: &ParamSet,
    data: &Dataset,
    example: usize,
    opts: &CrossSectionOptions,
) -> Result<CrossSection> {
    if example >= data.len() {
        return Err(Error::InvalidArgument(format!("example {example} out of range for {} examples", data.len())));
    }
    if opts.resolution < 2 {
        return Err(Error::InvalidArgument(format!("resolution must be >= 2, got {}", opts.resolution)));
    }
    let dim = data.dim();
    if dim < 2 {
        return Err(Error::InvalidArgument("cross sections need at least two input dimensions".into()));
    }
    let radius = opts.radius.unwrap_or_else(|| 5.0 * data.feature_std());
    let (d1, d2) = orthonormal_pair(dim, opts.seed)?;
    let center = data.features.row(example);
    let r = opts.resolution;
    let mut feats = Vec::with_capacity(r * r * dim);
    for i in 0..r {
        let a = grid_coord(radius, r, i);
        for j in 0..r {
            let b = grid_coord(radius, r, j);
            feats.extend((0..dim).map(|k| center[k] + a * d1[k] + b * d2[k]));
        }
    }
    let probs = model.probabilities(params, &Tensor::new(vec![r * r, dim], feats)?, &opts.acts)?;
    let classes = (0..r * r).map(|i| argmax(probs.row(i))).collect();
    let max_prob = (0..r * r).map(|i| probs.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect();
    Ok(CrossSection { center: example, d1, d2, radius, resolution: r, classes, max_prob })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_two_moons;
    use crate::model::ModelSpec;

    #[test]
    fn directions_are_orthonormal() {
        for s in 0..20 {
            let (a, b) = orthonormal_pair(5, s).unwrap();
            let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
            assert!((dot(&a, &a) - 1.0).abs() < 1e-10);
            assert!((dot(&b, &b) - 1.0).abs() < 1e-10);
            assert!(dot(&a, &b).abs() < 1e-10);
        }
    }

    #[test]
    fn center_is_the_example_itself() {
        let m = Model::new(ModelSpec::mlp(2, &[8], 2)).unwrap();
        let p = m.init_params(3);
        let d = gen_two_moons(20, 0.1, 0).unwrap();
        let opts = CrossSectionOptions { resolution: 11, ..Default::default() };
        let cs = decision_cross_section(&m, &p, &d, 4, &opts).unwrap();
        assert_eq!(cs.coord(5), 0.0);
        let (x, _) = d.subset(&[4]);
        assert_eq!(cs.center_class(), m.predict(&p, &x, &ActQuant::Float).unwrap()[0]);
        assert_eq!(cs.classes.len(), 121);
        assert_eq!(cs.to_csv().lines().count(), 122);
    }

    #[test]
    fn constant_classifier_gives_one_class() {
        let m = Model::new(ModelSpec::mlp(2, &[4], 3)).unwrap();
        let mut p = m.init_params(0);
        for param in &mut p.params {
            param.value = param.value.map(|_| 0.0);
        }
        p.params[3].value = Tensor::vector(vec![0.0, 1.0, 0.0]);
        let d = gen_two_moons(20, 0.1, 0).unwrap();
        let opts = CrossSectionOptions { resolution: 9, ..Default::default() };
        let cs = decision_cross_section(&m, &p, &d, 0, &opts).unwrap();
        assert!(cs.classes.iter().all(|&c| c == 1));
        assert_eq!(cs.same_class_fraction(), 1.0);
    }

    #[test]
    fn argument_checks() {
        let m = Model::new(ModelSpec::mlp(2, &[4], 2)).unwrap();
        let p = m.init_params(0);
        let d = gen_two_moons(20, 0.1, 0).unwrap();
        let bad_res = CrossSectionOptions { resolution: 1, ..Default::default() };
        assert!(decision_cross_section(&m, &p, &d, 0, &bad_res).is_err());
        assert!(decision_cross_section(&m, &p, &d, 20, &CrossSectionOptions::default()).is_err());
    }
}
