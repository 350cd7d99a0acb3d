//! The five subcommands. Each writes its outputs under the run directory and
//! refreshes `manifest.txt` there.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use hydrodeep::data::{load_watershed, write_watershed, PreparedWatershed, Split, WindowedSample, CHANNELS, WINDOW};
use hydrodeep::metrics::{evaluate, predictions, EvalResult};
use hydrodeep::model::{
    build_model, load_checkpoint, model_grad_check, save_checkpoint, ArchSpec, ConvSpec, Model, Variant,
    CHECKPOINT_VERSION,
};
use hydrodeep::nn::{grad_check, grad_check_with, Activation, Conv1d, Dense, LayerParams, Lstm};
use hydrodeep::synth::generate_watershed;
use hydrodeep::train::{train, TrainReport};
use hydrodeep::transfer::{run_transfer_matrix, MatrixConfig, TransferMatrix};
use hydrodeep::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::Settings;

pub const EVAL_CSV_HEADER: &str = "dataset,split,nse,rmse,n_points";
pub const PREDICTIONS_CSV_HEADER: &str = "date,observed,simulated";

/// A resolved run plus the global flags.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub settings: Settings,
    pub force: bool,
}

impl RunContext {
    pub fn new(settings: Settings, force: bool) -> Self {
        Self { settings, force }
    }

    pub fn run_dir(&self) -> &Path {
        &self.settings.run_dir
    }

    pub fn data_dir(&self) -> PathBuf {
        self.run_dir().join("data")
    }

    pub fn source_dir(&self) -> PathBuf {
        self.data_dir().join(&self.settings.source.name)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.run_dir().join("pretrain").join("model.hdc")
    }

    pub fn config_sha256(&self) -> String {
        hex::encode(Sha256::digest(self.settings.effective_text.as_bytes()))
    }

    /// Writes `config.txt` (every key resolved) and `manifest.txt` into the run directory.
    fn record(&self, command: &str) -> Result<()> {
        let dir = self.run_dir();
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("config.txt"), &self.settings.effective_text)?;
        let manifest = format!(
            "command = {command}\nconfig_sha256 = {}\nhydrodeep_version = {}\ncheckpoint_format_version = {CHECKPOINT_VERSION}\n",
            self.config_sha256(),
            env!("CARGO_PKG_VERSION"),
        );
        fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    fn guard_file(&self, path: &Path) -> Result<()> {
        if path.exists() && !self.force {
            bail!("{} already exists (pass --force to overwrite)", path.display());
        }
        Ok(())
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Name, grid count and day count of one generated watershed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedEntry {
    pub name: String,
    pub grids: usize,
    pub days: usize,
    pub dir: PathBuf,
}

/// Generates the source and every declared target into `out` (default `<run>/data`).
pub fn cmd_gen(ctx: &RunContext, out: Option<&Path>, w: &mut dyn Write) -> Result<Vec<GeneratedEntry>> {
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| ctx.data_dir());
    let non_empty = out.is_dir() && fs::read_dir(&out)?.next().is_some();
    if non_empty && !ctx.force {
        bail!("{} is not empty (pass --force to overwrite)", out.display());
    }
    ctx.record("gen")?;
    let mut specs = vec![ctx.settings.source.clone()];
    specs.extend(ctx.settings.target_specs());
    let mut entries = Vec::new();
    writeln!(w, "name\tgrids\tdays")?;
    for spec in &specs {
        let ds = generate_watershed(spec).with_context(|| format!("generating {}", spec.name))?;
        let dir = out.join(&spec.name);
        write_watershed(&ds, &dir).with_context(|| format!("writing {}", dir.display()))?;
        writeln!(w, "{}\t{}\t{}", spec.name, ds.grid_count(), ds.days())?;
        entries.push(GeneratedEntry {
            name: spec.name.clone(),
            grids: ds.grid_count(),
            days: ds.days(),
            dir,
        });
    }
    Ok(entries)
}

fn prepare(ctx: &RunContext, dir: &Path) -> Result<PreparedWatershed> {
    let ds = load_watershed(dir).with_context(|| format!("loading {}", dir.display()))?;
    Ok(PreparedWatershed::new(ds, ctx.settings.train_fraction)?)
}

fn eval_row(dataset: &str, split: Split, r: &EvalResult) -> String {
    format!("{dataset},{},{:.17e},{:.17e},{}\n", split.name(), r.nse, r.rmse, r.n_points)
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub report: TrainReport,
    pub train: EvalResult,
    pub validation: EvalResult,
    pub test: EvalResult,
}

/// Trains the configured architecture on the source train split and writes
/// `model.hdc`, `report.csv` and `eval.csv` next to the checkpoint.
pub fn cmd_pretrain(
    ctx: &RunContext,
    data: Option<&Path>,
    checkpoint: Option<&Path>,
    w: &mut dyn Write,
) -> Result<PretrainOutcome> {
    let data = data.map(Path::to_path_buf).unwrap_or_else(|| ctx.source_dir());
    let checkpoint = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| ctx.checkpoint_path());
    ctx.guard_file(&checkpoint)?;
    let source = prepare(ctx, &data)?;
    ctx.record("pretrain")?;

    let mut model = build_model(&ctx.settings.arch, ctx.settings.arch_seed)?;
    let report = train(&mut model, &source.train, &ctx.settings.train)?;
    let validation_samples = source.samples(Split::Validation)?;
    let train_eval = evaluate(&model, &source.train, &source.stats)?;
    let validation = evaluate(&model, &validation_samples, &source.stats)?;
    let test = evaluate(&model, &source.test, &source.stats)?;

    if let Some(parent) = checkpoint.parent() {
        fs::create_dir_all(parent)?;
    }
    save_checkpoint(&model, &checkpoint)?;
    let out_dir = checkpoint.parent().unwrap_or(Path::new("."));
    write_file(&out_dir.join("report.csv"), report.to_csv())?;
    let name = source.name();
    let eval_csv = format!(
        "{EVAL_CSV_HEADER}\n{}{}{}",
        eval_row(name, Split::Train, &train_eval),
        eval_row(name, Split::Validation, &validation),
        eval_row(name, Split::Test, &test)
    );
    write_file(&out_dir.join("eval.csv"), eval_csv)?;

    writeln!(
        w,
        "pretrained {} params on {} ({} samples, {} epochs) in {:.2}s",
        model.param_count(),
        name,
        source.train.len(),
        ctx.settings.train.iterations,
        report.wall_seconds
    )?;
    writeln!(w, "train NSE      {:.4}", train_eval.nse)?;
    writeln!(w, "validation NSE {:.4}", validation.nse)?;
    writeln!(w, "test NSE       {:.4}", test.nse)?;
    writeln!(w, "checkpoint     {}", checkpoint.display())?;
    Ok(PretrainOutcome {
        checkpoint,
        report,
        train: train_eval,
        validation,
        test,
    })
}

/// Runs the HD baseline and every configured mode on each declared target
/// found under `targets_dir`, writing `results.csv` and `table.txt`.
pub fn cmd_transfer(
    ctx: &RunContext,
    checkpoint: Option<&Path>,
    targets_dir: Option<&Path>,
    w: &mut dyn Write,
) -> Result<TransferMatrix> {
    let checkpoint = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| ctx.checkpoint_path());
    let targets_dir = targets_dir.map(Path::to_path_buf).unwrap_or_else(|| ctx.data_dir());
    let out_dir = ctx.run_dir().join("transfer");
    ctx.guard_file(&out_dir.join("results.csv"))?;
    let source = load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let targets = ctx
        .settings
        .targets
        .iter()
        .map(|t| prepare(ctx, &targets_dir.join(&t.name)))
        .collect::<Result<Vec<_>>>()?;
    ctx.record("transfer")?;

    let config = MatrixConfig {
        train: ctx.settings.train.clone(),
        finetune_iterations: ctx.settings.transfer_iterations,
        scratch_seed: ctx.settings.arch_seed,
        parallel: ctx.settings.transfer_parallel,
    };
    let matrix = run_transfer_matrix(&source, &targets, &ctx.settings.transfer_modes, &config)?;
    write_file(&out_dir.join("results.csv"), matrix.to_csv())?;
    let table = matrix.to_table();
    write_file(&out_dir.join("table.txt"), &table)?;
    write!(w, "{table}")?;
    Ok(matrix)
}

/// Zero-shot evaluation of a checkpoint on one split of a dataset. Writes the
/// summary and per-day predictions under `<run>/eval/`.
pub fn cmd_eval(
    ctx: &RunContext,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
    split: &str,
    w: &mut dyn Write,
) -> Result<EvalResult> {
    let Some(split) = Split::parse(split) else {
        bail!("unknown split `{split}` (valid splits: {})", Split::NAMES.join(", "));
    };
    let checkpoint = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| ctx.checkpoint_path());
    let data = data.map(Path::to_path_buf).unwrap_or_else(|| ctx.source_dir());
    let model = load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let prepared = prepare(ctx, &data)?;
    let name = prepared.name().to_string();
    let out_dir = ctx.run_dir().join("eval");
    let summary_path = out_dir.join(format!("{name}-{}.csv", split.name()));
    ctx.guard_file(&summary_path)?;
    ctx.record("eval")?;

    let samples = prepared.samples(split)?;
    let result = evaluate(&model, &samples, &prepared.stats)?;
    write_file(&summary_path, format!("{EVAL_CSV_HEADER}\n{}", eval_row(&name, split, &result)))?;
    let mut rows = format!("{PREDICTIONS_CSV_HEADER}\n");
    for (s, (obs, sim)) in samples.iter().zip(predictions(&model, &samples, &prepared.stats)?) {
        rows.push_str(&format!("{},{obs:.17e},{sim:.17e}\n", s.t_p));
    }
    write_file(&out_dir.join(format!("{name}-{}-predictions.csv", split.name())), rows)?;
    writeln!(
        w,
        "{name} {}: NSE {:.4}, RMSE {:.4} over {} days",
        split.name(),
        result.nse,
        result.rmse,
        result.n_points
    )?;
    Ok(result)
}

pub const GRADCHECK_CONFIGS: u64 = 100;
pub const GRADCHECK_EPSILON: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckSummary {
    /// (label, worst relative error) per layer kind and for the full model.
    pub worst: Vec<(&'static str, f64)>,
    pub seconds: f64,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.worst.iter().all(|(_, e)| *e < GRADCHECK_TOLERANCE)
    }
}

fn random_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("matching length")
}

fn random_unit(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).expect("matching length")
}

fn random_sample(grids: usize, rng: &mut ChaCha8Rng) -> WindowedSample {
    WindowedSample {
        history: random_unit(&[grids, CHANNELS, WINDOW], rng),
        target_day: random_unit(&[grids, CHANNELS], rng),
        label: 0.0,
        t_p: hydrodeep::synth::default_start(),
    }
}

/// Jitters weights, centres LSTM biases and shifts the other biases positive,
/// so the full-model check probes a generic point rather than the all-zero-bias
/// initialization.
fn randomize_parameters(model: &mut Model, rng: &mut ChaCha8Rng) {
    let names = model.param_names();
    for (name, tensor) in names.iter().zip(model.tensors_mut()) {
        let shifted = name.ends_with("bias") && !name.starts_with("lstm");
        for v in tensor.values_mut() {
            *v += if shifted { rng.random_range(0.2..0.6) } else { rng.random_range(-0.5..0.5) };
        }
    }
}

/// Finite-difference check of every layer kind and the full model over seeded
/// random configurations. `inject_fault` perturbs one analytic conv gradient,
/// which the check must catch.
pub fn cmd_gradcheck(inject_fault: bool, w: &mut dyn Write) -> Result<GradcheckSummary> {
    let started = Instant::now();
    let eps = GRADCHECK_EPSILON;
    let mut worst = [("conv1d", 0.0f64), ("lstm", 0.0), ("dense", 0.0), ("model", 0.0)];
    for cfg in 0..GRADCHECK_CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg);
        let (c_in, c_out, k) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=3));
        let n = rng.random_range(1..=3);
        let t = rng.random_range(k..=8);
        let conv = LayerParams::Conv1d(Conv1d::glorot(c_in, c_out, k, &mut rng));
        let x = random_tensor(&[c_in, n, t], &mut rng);
        let e = if inject_fault && cfg == 0 {
            grad_check_with(&conv, &x, eps, |g| g.params[0].1.values_mut()[0] += 1e-2)?
        } else {
            grad_check(&conv, &x, eps)?
        };
        worst[0].1 = worst[0].1.max(e);

        let hidden = rng.random_range(1..=4);
        let t = rng.random_range(1..=6);
        let lstm = LayerParams::Lstm(Lstm::glorot(c_in, hidden, 1.0, &mut rng));
        worst[1].1 = worst[1].1.max(grad_check(&lstm, &random_tensor(&[c_in, n, t], &mut rng), eps)?);

        let (d_in, d_out) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let act = if rng.random_bool(0.5) { Activation::Relu } else { Activation::Identity };
        let dense = LayerParams::Dense(Dense::glorot(d_in, d_out, act, &mut rng));
        worst[2].1 = worst[2].1.max(grad_check(&dense, &random_tensor(&[d_in, n], &mut rng), eps)?);

        let arch = ArchSpec {
            conv: vec![ConvSpec {
                out_channels: rng.random_range(2..=4),
                kernel: rng.random_range(2..=3),
            }],
            lstm: vec![rng.random_range(2..=4)],
            target_branch_units: rng.random_range(1..=3),
            head: vec![rng.random_range(2..=4), 1],
            variant: Variant::HydroDeep,
        };
        let mut model: Model = build_model(&arch, cfg)?;
        randomize_parameters(&mut model, &mut rng);
        let batch: Vec<_> = (0..2).map(|_| random_sample(2, &mut rng)).collect();
        let refs: Vec<_> = batch.iter().collect();
        worst[3].1 = worst[3].1.max(model_grad_check(&model, &refs, eps)?);
    }
    let summary = GradcheckSummary {
        worst: worst.to_vec(),
        seconds: started.elapsed().as_secs_f64(),
    };
    for (label, e) in &summary.worst {
        writeln!(w, "{label:<7} max relative error {e:.3e}")?;
    }
    writeln!(
        w,
        "{} ({} configurations each, tolerance {GRADCHECK_TOLERANCE:e}, {:.1}s)",
        if summary.passed() { "PASS" } else { "FAIL" },
        GRADCHECK_CONFIGS,
        summary.seconds
    )?;
    Ok(summary)
}
