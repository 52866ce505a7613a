//! TOML experiment files.
//!
//! ```toml
//! seed = 0
//! output_dir = "runs/moons"
//!
//! [data]
//! kind = "moons"
//! n = 2000
//! noise = 0.3
//!
//! [model]
//! kind = "mlp"
//! input_dim = 2
//! hidden = [32, 32]
//! classes = 2
//!
//! [train]
//! epochs = 200
//! batch_size = 64
//! learning_rate = 0.05
//! reg_start_epoch = 185
//! quant_eval = ["8,8", "4,4", "3,3"]
//!
//! [reg]
//! family = "l1-grad"
//! lambda_w = 0.05
//! lambda_y = 0.05
//! ```
//!
//! The root `seed` drives everything: it replaces the data and training
//! seeds, which may be omitted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DataSpec;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::quant::QuantConfig;
use crate::regularizers::{RegConfig, RegFamily};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub reg: RegConfig,
    #[serde(default)]
    pub analysis: AnalysisToggles,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub ste: Option<SteConfig>,
}

/// Analyses run by `analyze` when no `--op` is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisToggles {
    pub grad_norms: bool,
    pub kl: bool,
    pub noise_histogram: bool,
    pub first_order: bool,
    pub cross_section: bool,
    /// Bit-width used by the noise histogram and first-order analyses.
    pub bits: u32,
    pub histogram_bins: usize,
    pub cross_section_resolution: usize,
}

impl Default for AnalysisToggles {
    fn default() -> Self {
        AnalysisToggles {
            grad_norms: true,
            kl: true,
            noise_histogram: true,
            first_order: true,
            cross_section: false,
            bits: 4,
            histogram_bins: 50,
            cross_section_resolution: 201,
        }
    }
}

/// Lambda candidates for `sweep`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub family: RegFamily,
    pub lambdas: Vec<f64>,
}

/// Straight-through fine-tuning settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteConfig {
    pub target: QuantConfig,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl ExperimentConfig {
    /// Parse and validate. Syntax and type errors carry line and column.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let raw: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        raw.resolve()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn resolve(mut self) -> Result<Self> {
        let field = |name: &str, e: Error| Error::Config(format!("{name}: {e}"));
        let root = self.seed;
        if self.data.seed() != 0 && self.data.seed() != root {
            return Err(Error::Config(format!("data.seed: {} conflicts with the root seed {root}", self.data.seed())));
        }
        if self.train.seed != 0 && self.train.seed != root {
            return Err(Error::Config(format!("train.seed: {} conflicts with the root seed {root}", self.train.seed)));
        }
        if self.train.reg != RegConfig::none() && self.train.reg != self.reg {
            return Err(Error::Config("train.reg: set the regularizer in the [reg] section".into()));
        }
        self.data = self.data.with_seed(root);
        self.train.seed = root;
        self.train.reg = self.reg;
        self.model.validate().map_err(|e| field("model", e))?;
        self.train.validate().map_err(|e| field("train", e))?;
        if let Some(s) = &self.sweep {
            if s.lambdas.is_empty() || s.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
                return Err(Error::Config("sweep.lambdas: need at least one finite lambda >= 0".into()));
            }
        }
        if let Some(s) = &self.ste {
            if !(s.learning_rate > 0.0 && s.learning_rate.is_finite()) {
                return Err(Error::Config(format!("ste.learning_rate: must be > 0, got {}", s.learning_rate)));
            }
        }
        let a = &self.analysis;
        if !(2..=16).contains(&a.bits) {
            return Err(Error::Config(format!("analysis.bits: {} outside 2..=16", a.bits)));
        }
        if a.histogram_bins == 0 || a.cross_section_resolution < 2 {
            return Err(Error::Config(
                "analysis: histogram_bins must be >= 1 and cross_section_resolution >= 2".into(),
            ));
        }
        Ok(self)
    }

    /// Hex sha256 of the resolved config in canonical TOML form.
    pub fn hash(&self) -> String {
        let canonical = self.to_toml();
        Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }
}
