//! Training and analysis of quantization-robust neural networks.
//!
//! Quantization noise on weights and activations is bounded in the
//! `l_inf` norm by half a bin width. The worst first-order loss increase
//! under such a perturbation is `delta * ||grad||_1`, so penalizing the
//! `l1` norm of the loss gradient makes a model robust to post-training
//! quantization at every bit-width simultaneously.
//!
//! The crate provides the pieces needed to study this on small problems:
//!
//! * [`autodiff`]: a reverse-mode engine whose gradients are themselves
//!   differentiable, so gradient-norm penalties can be optimized.
//! * [`quant`]: uniform symmetric fake quantization.
//! * [`data`] and [`model`]: synthetic datasets, IDX ingestion, small MLP
//!   and convolutional classifiers.
//! * [`regularizers`]: the `l1` and `l2` gradient penalties and the
//!   orthogonality (defensive quantization) baselines.
//! * [`train`]: SGD training with late-epoch regularization, grid search,
//!   straight-through fine-tuning and post-training evaluation.
//! * [`analysis`]: first-order predictions, worst-case perturbations,
//!   concentration bounds, KL gaps and decision-boundary cross sections.
//! * [`checkpoint`] and [`config`]: persistence and experiment files.
//!
//! ```no_run
//! use qrobust::data::gen_two_moons;
//! use qrobust::model::{Model, ModelSpec};
//! use qrobust::quant::QuantConfig;
//! use qrobust::regularizers::{RegConfig, RegFamily};
//! use qrobust::train::{calibration_batch, evaluate_quantized, train, TrainConfig};
//!
//! let data = gen_two_moons(2000, 0.3, 0)?.split(0.7, 0.15, 0)?;
//! let model = Model::new(ModelSpec::mlp(2, &[32, 32], 2))?;
//! let cfg = TrainConfig { reg: RegConfig::new(RegFamily::L1Grad, 0.05), ..Default::default() };
//! let out = train(&model, &data, &cfg)?;
//! let calib = calibration_batch(&data.train);
//! let acc = evaluate_quantized(&model, &out.params, &calib, &data.test, QuantConfig::new(3, 3)?)?;
//! # let _ = acc;
//! # Ok::<(), qrobust::Error>(())
//! ```

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod data;
mod error;
pub mod linalg;
pub mod model;
pub mod quant;
pub mod regularizers;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
