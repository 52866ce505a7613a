//! Command-line front end.
//!
//! Exit status: 0 success, 1 runtime error, 2 usage error. Every command
//! that writes into an output directory also writes `manifest.json` there,
//! holding the arguments, resolved config, root seed, crate version and a
//! sha256 of each output file. Nothing in the outputs depends on wall-clock
//! time.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analysis;
use crate::checkpoint::{load_checkpoint, Checkpoint, Provenance};
use crate::config::ExperimentConfig;
use crate::data::{DataSpec, SplitData};
use crate::error::{Error, Result};
use crate::model::{ActQuant, Model};
use crate::quant::QuantConfig;
use crate::train::{self, metrics_csv, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "qrobust", version, about = "Quantization-robust training and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Post-training quantized accuracy of a checkpoint on its test split.
    QuantizeEval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `weight_bits,act_bits` pairs; defaults to the config's quant_eval list.
        #[arg(long, num_args = 1..)]
        bits: Vec<QuantConfig>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Lambda grid search, or a bit-width sweep of one trained model.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = SweepKind::Lambda)]
        kind: SweepKind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run analysis operations.
    Analyze {
        #[arg(long, value_enum)]
        op: Option<Op>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset as CSV.
    GenData {
        #[arg(long, value_enum)]
        kind: DataKind,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 1.0)]
        turns: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SweepKind {
    Lambda,
    Bits,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Op {
    Hoeffding,
    NormCheck,
    GradNorms,
    Kl,
    NoiseHistogram,
    FirstOrder,
    CrossSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DataKind {
    Moons,
    Spirals,
}

/// Parse `argv` (including the program name) and run. Output goes to
/// stdout, diagnostics to stderr.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_cli_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

/// [`run_cli`] with explicit output streams.
pub fn run_cli_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let argv: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, &argv, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command, argv: &[String], out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Train { config, out: dir } => cmd_train(&config, dir, argv, out),
        Command::QuantizeEval { checkpoint, bits, config, out: dir } => {
            cmd_quantize_eval(&checkpoint, bits, config.as_deref(), dir, argv, out)
        }
        Command::Sweep { config, kind, out: dir } => cmd_sweep(&config, kind, dir, argv, out),
        Command::Analyze { op, checkpoint, config, n, delta, eps, trials, seed, out: dir } => {
            let a = AnalyzeArgs { op, checkpoint, config, n, delta, eps, trials, seed, dir };
            cmd_analyze(a, argv, out)
        }
        Command::GenData { kind, n, noise, turns, seed, out: path } => {
            let spec = match kind {
                DataKind::Moons => DataSpec::Moons { n, noise, seed },
                DataKind::Spirals => DataSpec::Spirals { n, turns, noise, seed },
            };
            let csv = spec.generate()?.to_csv();
            write_file(&path, csv.as_bytes())?;
            let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Outputs { dir: dir.to_path_buf(), files: vec![(name, sha256_hex(csv.as_bytes()))] }
                .manifest(argv, None, seed)?;
            writeln!(out, "wrote {} examples to {}", n, path.display()).map_err(stdout_err)
        }
    }
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    args: &'a [String],
    seed: u64,
    config_hash: Option<String>,
    config: Option<String>,
    outputs: Vec<ManifestEntry>,
}

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    sha256: String,
}

/// Files written into one output directory.
struct Outputs {
    dir: PathBuf,
    files: Vec<(String, String)>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Outputs { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_file(&self.dir.join(name), bytes)?;
        self.files.push((name.to_string(), sha256_hex(bytes)));
        Ok(())
    }

    fn manifest(self, argv: &[String], cfg: Option<&ExperimentConfig>, seed: u64) -> Result<()> {
        let m = Manifest {
            tool: "qrobust",
            version: env!("CARGO_PKG_VERSION"),
            args: argv,
            seed,
            config_hash: cfg.map(ExperimentConfig::hash),
            config: cfg.map(ExperimentConfig::to_toml),
            outputs: self.files.into_iter().map(|(file, sha256)| ManifestEntry { file, sha256 }).collect(),
        };
        let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
        write_file(&self.dir.join("manifest.json"), json.as_bytes())
    }
}

fn provenance(cfg: &ExperimentConfig, epoch: usize) -> Provenance {
    Provenance { config_hash: cfg.hash(), seed: cfg.seed, epoch }
}

fn checkpoint_of(cfg: &ExperimentConfig, outcome: &train::TrainOutcome) -> Checkpoint {
    let mut ck = Checkpoint::new(cfg.model.clone(), outcome.params.clone(), provenance(cfg, outcome.epoch));
    ck.data = Some(cfg.data.clone());
    if let Some(s) = &outcome.schemes {
        ck.schemes = s.clone();
    }
    ck
}

fn cmd_train(config: &Path, dir: Option<PathBuf>, argv: &[String], out: &mut dyn Write) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let model = Model::new(cfg.model.clone())?;
    let data = cfg.data.load_split()?;
    let outcome = train::train(&model, &data, &cfg.train)?;
    let mut files = Outputs::new(dir.as_deref().unwrap_or(&cfg.output_dir))?;
    files.write("metrics.csv", metrics_csv(&outcome.metrics).as_bytes())?;
    files.write("model.ckpt", &checkpoint_of(&cfg, &outcome).to_bytes()?)?;
    let fp = model.accuracy(&outcome.params, &data.test.features, &data.test.labels, &ActQuant::Float)?;
    let mut summary = format!("trained {} epochs, test accuracy {fp:.4}", outcome.epoch);
    if let Some(ste) = &cfg.ste {
        let ste_cfg = TrainConfig { epochs: ste.epochs, learning_rate: ste.learning_rate, ..cfg.train.clone() };
        let tuned = train::ste_finetune(&model, &outcome.params, &data, ste.target, &ste_cfg)?;
        files.write("ste_metrics.csv", metrics_csv(&tuned.metrics).as_bytes())?;
        files.write("ste.ckpt", &checkpoint_of(&cfg, &tuned).to_bytes()?)?;
        let _ = write!(summary, "; straight-through model at ({}) written", ste.target);
    }
    files.manifest(argv, Some(&cfg), cfg.seed)?;
    writeln!(out, "{summary}").map_err(stdout_err)
}

fn eval_data(ck: &Checkpoint) -> Result<SplitData> {
    ck.data
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("checkpoint carries no dataset description".into()))?
        .load_split()
}

fn bits_csv(rows: &[(QuantConfig, f64)]) -> String {
    let mut s = String::from("weight_bits,act_bits,accuracy\n");
    for (q, a) in rows {
        let _ = writeln!(s, "{},{},{a:.4}", q.weight_bits, q.act_bits);
    }
    s
}

fn cmd_quantize_eval(
    checkpoint: &Path,
    bits: Vec<QuantConfig>,
    config: Option<&Path>,
    dir: Option<PathBuf>,
    argv: &[String],
    out: &mut dyn Write,
) -> Result<()> {
    let cfg = config.map(ExperimentConfig::load).transpose()?;
    let bits =
        if bits.is_empty() { cfg.as_ref().map(|c| c.train.quant_eval.clone()).unwrap_or_default() } else { bits };
    if bits.is_empty() {
        return Err(Error::InvalidArgument("no bit-widths: pass --bits or a config with train.quant_eval".into()));
    }
    let ck = load_checkpoint(checkpoint)?;
    let model = Model::new(ck.model.clone())?;
    let data = eval_data(&ck)?;
    let calib = train::calibration_batch(&data.train);
    let rows = bits
        .iter()
        .map(|&q| Ok((q, train::evaluate_quantized(&model, &ck.params, &calib, &data.test, q)?)))
        .collect::<Result<Vec<_>>>()?;
    let csv = bits_csv(&rows);
    write!(out, "{csv}").map_err(stdout_err)?;
    if let Some(dir) = dir {
        let mut files = Outputs::new(&dir)?;
        files.write("quantized.csv", csv.as_bytes())?;
        files.manifest(argv, cfg.as_ref(), ck.provenance.seed)?;
    }
    Ok(())
}

fn cmd_sweep(config: &Path, kind: SweepKind, dir: Option<PathBuf>, argv: &[String], out: &mut dyn Write) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let model = Model::new(cfg.model.clone())?;
    let data = cfg.data.load_split()?;
    let mut files = Outputs::new(dir.as_deref().unwrap_or(&cfg.output_dir))?;
    match kind {
        SweepKind::Lambda => {
            let sweep =
                cfg.sweep.as_ref().ok_or_else(|| Error::Config("a lambda sweep needs a [sweep] section".into()))?;
            let report = train::lambda_grid_search(&model, &data, &sweep.lambdas, sweep.family, &cfg.train)?;
            let mut csv = String::from("lambda,fp_accuracy,train_loss,penalty\n");
            for e in &report.entries {
                let _ = writeln!(csv, "{},{},{},{}", e.lambda, e.fp_accuracy, e.train_loss, e.penalty);
            }
            files.write("sweep.csv", csv.as_bytes())?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            files.write("sweep.json", json.as_bytes())?;
            writeln!(out, "{csv}chosen lambda {}", report.chosen).map_err(stdout_err)?;
            if let Some(w) = &report.warning {
                writeln!(out, "warning: {w}").map_err(stdout_err)?;
            }
        }
        SweepKind::Bits => {
            if cfg.train.quant_eval.is_empty() {
                return Err(Error::Config("a bit-width sweep needs train.quant_eval".into()));
            }
            let outcome = train::train(&model, &data, &cfg.train)?;
            let calib = train::calibration_batch(&data.train);
            let rows = cfg
                .train
                .quant_eval
                .iter()
                .map(|&q| Ok((q, train::evaluate_quantized(&model, &outcome.params, &calib, &data.test, q)?)))
                .collect::<Result<Vec<_>>>()?;
            let csv = bits_csv(&rows);
            files.write("bits.csv", csv.as_bytes())?;
            write!(out, "{csv}").map_err(stdout_err)?;
        }
    }
    files.manifest(argv, Some(&cfg), cfg.seed)
}

struct AnalyzeArgs {
    op: Option<Op>,
    checkpoint: Option<PathBuf>,
    config: Option<PathBuf>,
    n: Option<usize>,
    delta: Option<f64>,
    eps: Option<f64>,
    trials: usize,
    seed: u64,
    dir: Option<PathBuf>,
}

fn cmd_analyze(a: AnalyzeArgs, argv: &[String], out: &mut dyn Write) -> Result<()> {
    let mut results: Vec<(String, Vec<u8>)> = Vec::new();
    let need = |v: Option<f64>, flag: &str| v.ok_or_else(|| Error::InvalidArgument(format!("--op needs --{flag}")));
    let cfg = a.config.as_deref().map(ExperimentConfig::load).transpose()?;
    match a.op {
        Some(op @ (Op::Hoeffding | Op::NormCheck)) => {
            let n = a.n.ok_or_else(|| Error::InvalidArgument("--op needs --n".into()))?;
            let (delta, eps) = (need(a.delta, "delta")?, need(a.eps, "eps")?);
            if op == Op::Hoeffding {
                let b = analysis::hoeffding_interval(n, delta, eps)?;
                writeln!(out, "[{:.2}, {:.2}]", b.lower(), b.upper()).map_err(stdout_err)?;
                results.push(("hoeffding.json".into(), to_json(&b)));
            } else {
                let r = analysis::monte_carlo_norm_check(n, delta, eps, a.trials, a.seed)?;
                writeln!(
                    out,
                    "[{:.2}, {:.2}] coverage {:.5} over {} trials",
                    r.bounds.lower(),
                    r.bounds.upper(),
                    r.empirical_coverage,
                    r.trials
                )
                .map_err(stdout_err)?;
                results.push(("norm_check.json".into(), to_json(&r)));
            }
        }
        op => {
            let path = a
                .checkpoint
                .as_deref()
                .ok_or_else(|| Error::InvalidArgument("model analyses need --checkpoint".into()))?;
            let ck = load_checkpoint(path)?;
            let toggles = cfg.as_ref().map(|c| c.analysis.clone()).unwrap_or_default();
            let ops: Vec<Op> = match op {
                Some(o) => vec![o],
                None => [
                    (toggles.grad_norms, Op::GradNorms),
                    (toggles.kl, Op::Kl),
                    (toggles.noise_histogram, Op::NoiseHistogram),
                    (toggles.first_order, Op::FirstOrder),
                    (toggles.cross_section, Op::CrossSection),
                ]
                .into_iter()
                .filter_map(|(on, o)| on.then_some(o))
                .collect(),
            };
            let model = Model::new(ck.model.clone())?;
            let data = eval_data(&ck)?;
            for o in ops {
                model_analysis(o, &model, &ck, &data, &toggles, a.seed, &mut results, out)?;
            }
        }
    }
    if let Some(dir) = a.dir {
        let mut files = Outputs::new(&dir)?;
        for (name, bytes) in &results {
            files.write(name, bytes)?;
        }
        files.manifest(argv, cfg.as_ref(), a.seed)?;
    }
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec_pretty(v).expect("analysis records serialize")
}

#[allow(clippy::too_many_arguments)]
fn model_analysis(
    op: Op,
    model: &Model,
    ck: &Checkpoint,
    data: &SplitData,
    toggles: &crate::config::AnalysisToggles,
    seed: u64,
    results: &mut Vec<(String, Vec<u8>)>,
    out: &mut dyn Write,
) -> Result<()> {
    let p = &ck.params;
    // small test splits still need several batches for the first-order fit
    let batches = data.test.batches(32.min(data.test.len().div_ceil(4)).max(1));
    match op {
        Op::GradNorms => {
            let s = analysis::grad_norm_stats(model, p, &batches)?;
            let mut csv = String::from("batch,l1,l2\n");
            for (i, g) in s.iter().enumerate() {
                let _ = writeln!(csv, "{i},{},{}", g.l1, g.l2);
            }
            let mut l1: Vec<f64> = s.iter().map(|g| g.l1).collect();
            l1.sort_by(f64::total_cmp);
            writeln!(out, "grad-norms: median l1 {:.6} over {} batches", l1[l1.len() / 2], l1.len())
                .map_err(stdout_err)?;
            results.push(("grad_norms.csv".into(), csv.into_bytes()));
        }
        Op::Kl => {
            let calib = train::calibration_batch(&data.train);
            let mut csv = String::from("weight_bits,act_bits,kl\n");
            for b in [16, 8, 6, 4, 3] {
                let q = QuantConfig::new(b, b)?;
                let kl = analysis::kl_fp_vs_quantized(model, p, &calib, &data.test.features, Some(q))?;
                let _ = writeln!(csv, "{b},{b},{kl}");
            }
            write!(out, "{csv}").map_err(stdout_err)?;
            results.push(("kl.csv".into(), csv.into_bytes()));
        }
        Op::NoiseHistogram => {
            let h = analysis::noise_histogram(p, toggles.bits, toggles.histogram_bins)?;
            writeln!(out, "noise-histogram: {} values, KS distance {:.4}", h.count, h.ks_distance)
                .map_err(stdout_err)?;
            results.push(("noise_histogram.csv".into(), h.to_csv().into_bytes()));
        }
        Op::FirstOrder => {
            let r = analysis::noise_response(model, p, &batches, toggles.bits, seed)?;
            writeln!(out, "first-order: correlation {:.4} over {} batches", r.correlation, r.reports.len())
                .map_err(stdout_err)?;
            results.push(("first_order.json".into(), to_json(&r)));
        }
        Op::CrossSection => {
            let opts = analysis::CrossSectionOptions {
                resolution: toggles.cross_section_resolution,
                seed,
                ..Default::default()
            };
            let cs = analysis::decision_cross_section(model, p, &data.test, 0, &opts)?;
            writeln!(out, "cross-section: {:.4} of the grid shares the center class", cs.same_class_fraction())
                .map_err(stdout_err)?;
            results.push(("cross_section.csv".into(), cs.to_csv().into_bytes()));
        }
        Op::Hoeffding | Op::NormCheck => unreachable!("handled by the caller"),
    }
    Ok(())
}
