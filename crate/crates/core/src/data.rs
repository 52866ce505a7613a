//! Datasets: synthetic generators, IDX ingestion and train/val/test splits.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, d]`
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if features.shape().len() != 2 || features.shape()[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("features {:?} for {} labels", features.shape(), labels.len()),
            ));
        }
        if labels.is_empty() {
            return Err(Error::InvalidArgument("dataset must not be empty".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} >= {classes} classes")));
        }
        if !features.is_finite() {
            return Err(Error::InvalidArgument("features contain non-finite values".into()));
        }
        Ok(Dataset { features, labels, classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn subset(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.features.select_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// First `n` examples (or all of them) as a batch.
    pub fn head(&self, n: usize) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Consecutive batches in storage order; the last one may be short.
    pub fn batches(&self, batch_size: usize) -> Vec<(Tensor, Vec<usize>)> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1)).map(|c| self.subset(c)).collect()
    }

    /// Mean of the per-feature standard deviations.
    pub fn feature_std(&self) -> f64 {
        let (n, d) = (self.len() as f64, self.dim());
        let mut total = 0.0;
        for j in 0..d {
            let col = (0..self.len()).map(|i| self.features.data()[i * d + j]);
            let mean = col.clone().sum::<f64>() / n;
            let var = col.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            total += var.sqrt();
        }
        total / d as f64
    }

    /// Shuffle and cut into train/val/test parts.
    pub fn split(&self, train_frac: f64, val_frac: f64, seed: u64) -> Result<SplitData> {
        if !(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac <= 1.0) {
            return Err(Error::InvalidArgument(format!("bad split fractions {train_frac}, {val_frac}")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut seed::labeled_rng(seed, "split"));
        let n = self.len();
        let n_train = ((n as f64 * train_frac).round() as usize).max(1);
        let n_val = ((n as f64 * val_frac).round() as usize).min(n - n_train);
        let part = |range: &[usize], split: Split| -> Result<Dataset> {
            let (x, y) = self.subset(range);
            Dataset::new(x, y, self.classes, split)
        };
        let train = part(&idx[..n_train], Split::Train)?;
        let val = part(&idx[n_train..n_train + n_val], Split::Val)?;
        let test = part(&idx[n_train + n_val..], Split::Test)?;
        Ok(SplitData { train, val, test })
    }

    /// `x0,...,x{d-1},label` rows with a header line.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::new();
        for j in 0..d {
            let _ = write!(out, "x{j},");
        }
        out.push_str("label\n");
        for i in 0..self.len() {
            for v in self.features.row(i) {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(out, "{}", self.labels[i]);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct SplitData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn check_n(n: usize, noise_sd: f64) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 points, got {n}")));
    }
    if !n.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("point count must be even, got {n}")));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise_sd must be >= 0, got {noise_sd}")));
    }
    Ok(())
}

fn finish(points: Vec<([f64; 2], usize)>, noise_sd: f64, seed: u64) -> Result<Dataset> {
    let mut rng = seed::labeled_rng(seed, "data");
    let normal = Normal::new(0.0, noise_sd.max(f64::MIN_POSITIVE)).expect("valid sd");
    let mut points = points;
    points.shuffle(&mut rng);
    let mut feats = Vec::with_capacity(points.len() * 2);
    let mut labels = Vec::with_capacity(points.len());
    for ([x, y], c) in points {
        let (nx, ny) = if noise_sd > 0.0 { (normal.sample(&mut rng), normal.sample(&mut rng)) } else { (0.0, 0.0) };
        feats.push(x + nx);
        feats.push(y + ny);
        labels.push(c);
    }
    Dataset::new(Tensor::new(vec![labels.len(), 2], feats)?, labels, 2, Split::Train)
}

fn linspace(m: usize, end: f64) -> impl Iterator<Item = f64> {
    (0..m).map(move |i| if m == 1 { 0.0 } else { end * i as f64 / (m - 1) as f64 })
}

/// Two interleaved half circles: class 0 on the unit circle around the
/// origin (upper half), class 1 on the unit circle around `(1, 0.5)`
/// (lower half).
pub fn gen_two_moons(n: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    check_n(n, noise_sd)?;
    let m = n / 2;
    let mut pts = Vec::with_capacity(n);
    for t in linspace(m, PI) {
        pts.push(([t.cos(), t.sin()], 0));
    }
    for t in linspace(m, PI) {
        pts.push(([1.0 - t.cos(), 0.5 - t.sin()], 1));
    }
    finish(pts, noise_sd, seed)
}

/// Two interleaved spiral arms; radius grows linearly from `1/m` to 1 along
/// each arm while the angle sweeps `turns` full revolutions.
pub fn gen_spirals(n: usize, turns: f64, noise_sd: f64, seed: u64) -> Result<Dataset> {
    check_n(n, noise_sd)?;
    if !(turns > 0.0 && turns.is_finite()) {
        return Err(Error::InvalidArgument(format!("turns must be positive, got {turns}")));
    }
    let m = n / 2;
    let mut pts = Vec::with_capacity(n);
    for class in 0..2 {
        for i in 0..m {
            let r = (i + 1) as f64 / m as f64;
            let theta = 2.0 * PI * turns * r + class as f64 * PI;
            pts.push(([r * theta.cos(), r * theta.sin()], class));
        }
    }
    finish(pts, noise_sd, seed)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn idx_err(detail: impl Into<String>) -> Error {
    Error::Format { kind: "IDX", detail: detail.into() }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| idx_err("truncated header"))
}

/// Parse an IDX image file into `(count, rows * cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(idx_err(format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    if body.len() < n * rows * cols {
        return Err(idx_err(format!("expected {} pixel bytes, found {}", n * rows * cols, body.len())));
    }
    Ok((n, rows * cols, &body[..n * rows * cols]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(idx_err(format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(idx_err(format!("expected {n} labels, found {}", body.len())));
    }
    Ok(&body[..n])
}

/// Decode an IDX image/label pair, keeping the first `subset` examples and
/// scaling pixels to `[0, 1]`.
pub fn decode_idx(images: &[u8], labels: &[u8], subset: usize) -> Result<Dataset> {
    let (n, dim, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != n {
        return Err(idx_err(format!("{n} images but {} labels", labels.len())));
    }
    let k = subset.min(n);
    if k == 0 {
        return Err(idx_err("no examples selected"));
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1);
    let feats = pixels[..k * dim].iter().map(|&p| p as f64 / 255.0).collect();
    Dataset::new(
        Tensor::new(vec![k, dim], feats)?,
        labels[..k].iter().map(|&l| l as usize).collect(),
        classes,
        Split::Train,
    )
}

pub fn load_idx(images: &Path, labels: &Path, subset: usize) -> Result<Dataset> {
    let img = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lab = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    decode_idx(&img, &lab, subset)
}

/// Serializable description of where a dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSpec {
    Moons {
        n: usize,
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    Spirals {
        n: usize,
        #[serde(default = "default_turns")]
        turns: f64,
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        subset: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_turns() -> f64 {
    1.0
}

impl DataSpec {
    pub fn generate(&self) -> Result<Dataset> {
        match self {
            DataSpec::Moons { n, noise, seed } => gen_two_moons(*n, *noise, *seed),
            DataSpec::Spirals { n, turns, noise, seed } => gen_spirals(*n, *turns, *noise, *seed),
            DataSpec::Idx { images, labels, subset, .. } => load_idx(images, labels, *subset),
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            DataSpec::Moons { seed, .. } | DataSpec::Spirals { seed, .. } | DataSpec::Idx { seed, .. } => *seed,
        }
    }

    pub fn with_seed(mut self, s: u64) -> Self {
        match &mut self {
            DataSpec::Moons { seed, .. } | DataSpec::Spirals { seed, .. } | DataSpec::Idx { seed, .. } => *seed = s,
        }
        self
    }

    /// Generate and split 70/15/15.
    pub fn load_split(&self) -> Result<SplitData> {
        self.generate()?.split(0.7, 0.15, self.seed())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moons_without_noise_lie_on_circles() {
        let d = gen_two_moons(4, 0.0, 3).unwrap();
        assert_eq!(d.len(), 4);
        for i in 0..4 {
            let p = d.features.row(i);
            let (cx, cy) = if d.labels[i] == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
            let r = ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt();
            assert!((r - 1.0).abs() < 1e-12);
            if d.labels[i] == 0 {
                assert!(p[1] >= -1e-12);
            } else {
                assert!(p[1] <= 0.5 + 1e-12);
            }
        }
        assert_eq!(d.labels.iter().filter(|&&y| y == 1).count(), 2);
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(gen_two_moons(200, 0.1, 9).unwrap(), gen_two_moons(200, 0.1, 9).unwrap());
        assert_ne!(gen_two_moons(200, 0.1, 9).unwrap(), gen_two_moons(200, 0.1, 10).unwrap());
        assert_eq!(gen_spirals(100, 1.5, 0.05, 1).unwrap(), gen_spirals(100, 1.5, 0.05, 1).unwrap());
    }

    #[test]
    fn generator_errors() {
        assert!(gen_two_moons(1, 0.0, 0).is_err());
        assert!(gen_two_moons(5, 0.0, 0).is_err());
        assert!(gen_two_moons(4, -1.0, 0).is_err());
        assert!(gen_spirals(0, 1.0, 0.0, 0).is_err());
        assert!(gen_spirals(4, 0.0, 0.0, 0).is_err());
    }

    #[test]
    fn spiral_radii_monotone_and_balanced() {
        let d = gen_spirals(4, 1.0, 0.0, 5).unwrap();
        for class in 0..2 {
            let mut radii: Vec<(f64, f64)> = (0..4)
                .filter(|&i| d.labels[i] == class)
                .map(|i| {
                    let p = d.features.row(i);
                    let r = p[0].hypot(p[1]);
                    let theta = p[1].atan2(p[0]);
                    (r, theta)
                })
                .collect();
            radii.sort_by(|a, b| a.0.total_cmp(&b.0));
            assert_eq!(radii.len(), 2);
            assert!(radii[0].0 < radii[1].0);
        }
        let d = gen_spirals(1000, 1.0, 0.1, 5).unwrap();
        assert_eq!(d.labels.iter().filter(|&&y| y == 0).count(), 500);
    }

    #[test]
    fn split_partitions_everything() {
        let d = gen_two_moons(100, 0.1, 1).unwrap();
        let s = d.split(0.7, 0.15, 1).unwrap();
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 100);
        assert_eq!(s.train.len(), 70);
        assert_eq!(s.test.split, Split::Test);
    }

    fn idx_images(n: u32, rows: u32, cols: u32, fill: u8) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_IMAGES.to_be_bytes());
        for v in [n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend(std::iter::repeat_n(fill, (n * rows * cols) as usize));
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn idx_decoding() {
        let d = decode_idx(&idx_images(2, 28, 28, 255), &idx_labels(&[3, 7]), 10).unwrap();
        assert_eq!(d.features.shape(), &[2, 784]);
        assert!(d.features.data().iter().all(|&v| v == 1.0));
        assert_eq!(d.labels, vec![3, 7]);
        assert_eq!(d.classes, 8);

        let d = decode_idx(&idx_images(2, 2, 2, 0), &idx_labels(&[1, 0]), 1).unwrap();
        assert_eq!(d.len(), 1);
    }

    #[test]
    fn idx_errors() {
        let mut bad = idx_images(2, 2, 2, 0);
        bad[3] = 0x01;
        assert!(matches!(decode_idx(&bad, &idx_labels(&[0, 1]), 2), Err(Error::Format { .. })));
        let mut short = idx_images(2, 2, 2, 0);
        short.truncate(20);
        assert!(matches!(decode_idx(&short, &idx_labels(&[0, 1]), 2), Err(Error::Format { .. })));
        assert!(matches!(decode_idx(&idx_images(2, 2, 2, 0), &idx_labels(&[0, 1, 1]), 2), Err(Error::Format { .. })));
    }
}
