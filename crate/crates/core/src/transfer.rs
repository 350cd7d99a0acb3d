//! The four transfer approaches as freeze plans over a pretrained model, and the
//! target × approach evaluation matrix with a from-scratch baseline column.

use std::fmt::{self, Write as _};

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{PreparedWatershed, WindowedSample};
use crate::metrics::{evaluate, EvalResult, MetricError};
use crate::model::{build_model, FreezeMask, Model, ModelError, ParamGroup};
use crate::train::{train, TrainConfig, TrainError, TrainReport};

pub const DEFAULT_FINETUNE_ITERATIONS: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransferError {
    #[error("{mode} needs target training samples")]
    NoTargetSamples { mode: TransferMode },
    #[error("unknown transfer mode `{0}` (expected T-HD-1, T-HD-2, T-HD-3 or T-HD-4)")]
    UnknownMode(String),
    #[error("target `{target}`: {source}")]
    Target {
        target: String,
        #[source]
        source: Box<TransferError>,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TransferMode {
    /// T-HD-1: source model used as is.
    ZeroShot,
    /// T-HD-2: every group finetuned.
    FullFinetune,
    /// T-HD-3: LSTM stack and head finetuned, spatial groups frozen.
    TemporalFinetune,
    /// T-HD-4: conv stack, target branch and head finetuned, LSTM frozen.
    SpatialFinetune,
}

impl TransferMode {
    pub const ALL: [TransferMode; 4] = [
        Self::ZeroShot,
        Self::FullFinetune,
        Self::TemporalFinetune,
        Self::SpatialFinetune,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::ZeroShot => "T-HD-1",
            Self::FullFinetune => "T-HD-2",
            Self::TemporalFinetune => "T-HD-3",
            Self::SpatialFinetune => "T-HD-4",
        }
    }

    pub fn parse(s: &str) -> Result<Self, TransferError> {
        Self::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| TransferError::UnknownMode(s.to_string()))
    }
}

impl fmt::Display for TransferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferPlan {
    pub mode: TransferMode,
    pub frozen: FreezeMask,
    pub iterations: usize,
}

/// The fixed mode-to-freeze mapping, with the default finetune budget.
pub fn make_transfer_plan(mode: TransferMode) -> TransferPlan {
    let (frozen, iterations) = match mode {
        TransferMode::ZeroShot => (FreezeMask::all(), 0),
        TransferMode::FullFinetune => (FreezeMask::none(), DEFAULT_FINETUNE_ITERATIONS),
        TransferMode::TemporalFinetune => (
            FreezeMask::of(&[ParamGroup::Conv, ParamGroup::TargetBranch]),
            DEFAULT_FINETUNE_ITERATIONS,
        ),
        TransferMode::SpatialFinetune => (FreezeMask::of(&[ParamGroup::Lstm]), DEFAULT_FINETUNE_ITERATIONS),
    };
    TransferPlan {
        mode,
        frozen,
        iterations,
    }
}

impl TransferPlan {
    /// Same plan with a different finetune budget; zero-shot always stays at 0.
    pub fn with_iterations(mut self, iterations: usize) -> Self {
        if self.mode != TransferMode::ZeroShot {
            self.iterations = iterations;
        }
        self
    }
}

/// Applies `plan` to a copy of `source`. `config` supplies optimizer settings and
/// the shuffle seed; iterations and freeze mask come from the plan.
pub fn transfer_model(
    source: &Model,
    plan: &TransferPlan,
    target_train: &[WindowedSample],
    config: &TrainConfig,
) -> Result<(Model, TrainReport), TransferError> {
    let config = TrainConfig {
        iterations: plan.iterations,
        freeze: plan.frozen.clone(),
        ..config.clone()
    };
    let mut model = source.clone();
    if plan.mode == TransferMode::ZeroShot {
        return Ok((
            model,
            TrainReport {
                losses: Vec::new(),
                wall_seconds: 0.0,
                config,
            },
        ));
    }
    if target_train.is_empty() {
        return Err(TransferError::NoTargetSamples { mode: plan.mode });
    }
    let report = train(&mut model, target_train, &config)?;
    Ok((model, report))
}

/// A result column: the from-scratch baseline or one transfer mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Column {
    Scratch,
    Mode(TransferMode),
}

impl Column {
    pub fn label(self) -> &'static str {
        match self {
            Self::Scratch => "HD",
            Self::Mode(m) => m.label(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MatrixConfig {
    /// Optimizer settings and shuffle seed shared by every trained cell.
    pub train: TrainConfig,
    pub finetune_iterations: usize,
    /// Initialization seed of the from-scratch baseline.
    pub scratch_seed: u64,
    pub parallel: bool,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            finetune_iterations: DEFAULT_FINETUNE_ITERATIONS,
            scratch_seed: 1,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MatrixCell {
    pub target: String,
    pub grids: usize,
    pub column: Column,
    pub eval: EvalResult,
    pub report: TrainReport,
    pub model: Model,
}

#[derive(Debug, Clone)]
pub struct TransferMatrix {
    /// Target-major, columns in the order HD then the requested modes.
    pub cells: Vec<MatrixCell>,
    pub columns: Vec<Column>,
}

fn run_cell(
    source: &Model,
    target: &PreparedWatershed,
    column: Column,
    config: &MatrixConfig,
) -> Result<MatrixCell, TransferError> {
    let (model, report) = match column {
        Column::Scratch => {
            let mut model = build_model(source.arch(), config.scratch_seed)?;
            let cfg = TrainConfig {
                iterations: config.finetune_iterations,
                freeze: FreezeMask::none(),
                ..config.train.clone()
            };
            if target.train.is_empty() {
                return Err(TrainError::EmptySamples.into());
            }
            let report = train(&mut model, &target.train, &cfg)?;
            (model, report)
        }
        Column::Mode(mode) => {
            let plan = make_transfer_plan(mode).with_iterations(config.finetune_iterations);
            transfer_model(source, &plan, &target.train, &config.train)?
        }
    };
    let eval = evaluate(&model, &target.test, &target.stats)?;
    Ok(MatrixCell {
        target: target.name().to_string(),
        grids: target.grid_count(),
        column,
        eval,
        report,
        model,
    })
}

/// Trains and scores the HD baseline plus each mode on every target's test split.
/// Every cell is independent, so parallel and serial runs agree except for timings.
pub fn run_transfer_matrix(
    source: &Model,
    targets: &[PreparedWatershed],
    modes: &[TransferMode],
    config: &MatrixConfig,
) -> Result<TransferMatrix, TransferError> {
    let mut columns = vec![Column::Scratch];
    columns.extend(modes.iter().map(|&m| Column::Mode(m)));
    let jobs: Vec<(usize, Column)> = (0..targets.len())
        .flat_map(|t| columns.iter().map(move |&c| (t, c)))
        .collect();
    let run = |&(t, c): &(usize, Column)| {
        run_cell(source, &targets[t], c, config).map_err(|e| TransferError::Target {
            target: targets[t].name().to_string(),
            source: Box::new(e),
        })
    };
    let cells = if config.parallel {
        jobs.par_iter().map(run).collect::<Result<Vec<_>, _>>()?
    } else {
        jobs.iter().map(run).collect::<Result<Vec<_>, _>>()?
    };
    Ok(TransferMatrix { cells, columns })
}

pub const MATRIX_CSV_HEADER: &str = "target,grids,mode,nse,rmse,train_seconds";

impl TransferMatrix {
    pub fn targets(&self) -> Vec<&str> {
        let mut names: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !names.contains(&c.target.as_str()) {
                names.push(&c.target);
            }
        }
        names
    }

    pub fn cell(&self, target: &str, column: Column) -> Option<&MatrixCell> {
        self.cells.iter().find(|c| c.target == target && c.column == column)
    }

    pub fn row(&self, target: &str) -> Vec<&MatrixCell> {
        self.cells.iter().filter(|c| c.target == target).collect()
    }

    /// Column with the highest test NSE in a row (first on ties).
    pub fn best(&self, target: &str) -> Option<Column> {
        self.row(target)
            .into_iter()
            .fold(None::<&MatrixCell>, |best, c| match best {
                Some(b) if b.eval.nse >= c.eval.nse => Some(b),
                _ => Some(c),
            })
            .map(|c| c.column)
    }

    pub fn best_transfer(&self, target: &str) -> Option<&MatrixCell> {
        self.row(target)
            .into_iter()
            .filter(|c| c.column != Column::Scratch)
            .fold(None, |best: Option<&MatrixCell>, c| match best {
                Some(b) if b.eval.nse >= c.eval.nse => Some(b),
                _ => Some(c),
            })
    }

    pub fn to_csv(&self) -> String {
        self.csv(true)
    }

    /// The CSV with the `train_seconds` column left empty, for reproducibility checks.
    pub fn to_csv_without_timing(&self) -> String {
        self.csv(false)
    }

    fn csv(&self, timing: bool) -> String {
        let mut out = format!("{MATRIX_CSV_HEADER}\n");
        for c in &self.cells {
            let secs = if timing { format!("{:.6}", c.report.wall_seconds) } else { String::new() };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                c.target,
                c.grids,
                c.column.label(),
                c.eval.nse,
                c.eval.rmse,
                secs
            );
        }
        out
    }

    /// Fixed-width table: target, grids, one NSE column per result column with the
    /// row's best marked `*`, and mean ± sd wall time of the finetuned cells.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10} {:>5}", "target", "grids");
        for c in &self.columns {
            let _ = write!(out, " {:>9}", c.label());
        }
        let _ = writeln!(out, "  {:>17}", "Time (s)");
        for target in self.targets() {
            let row = self.row(target);
            let best = self.best(target);
            let _ = write!(out, "{:<10} {:>5}", target, row[0].grids);
            for col in &self.columns {
                let cell = row.iter().find(|c| c.column == *col);
                let text = match cell {
                    Some(c) => format!("{:.3}{}", c.eval.nse, if Some(*col) == best { "*" } else { " " }),
                    None => "-".into(),
                };
                let _ = write!(out, " {text:>9}");
            }
            let times: Vec<f64> = row
                .iter()
                .filter(|c| matches!(c.column, Column::Mode(m) if m != TransferMode::ZeroShot))
                .map(|c| c.report.wall_seconds)
                .collect();
            let _ = writeln!(out, "  {:>17}", mean_sd(&times));
        }
        out
    }
}

fn mean_sd(v: &[f64]) -> String {
    if v.is_empty() {
        return "-".into();
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    format!("{mean:.2} ± {sd:.2}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchSpec, ConvSpec, Variant};
    use crate::synth::{generate_watershed, Relation, SynthSpec};
    use crate::train::mse_loss;

    fn small_arch() -> ArchSpec {
        ArchSpec {
            conv: vec![ConvSpec {
                out_channels: 4,
                kernel: 3,
            }],
            lstm: vec![4],
            target_branch_units: 2,
            head: vec![4, 1],
            variant: Variant::HydroDeep,
        }
    }

    fn watershed(name: &str, grids: usize, seed: u64) -> PreparedWatershed {
        let spec = SynthSpec::new("base", 3, 200, 0).derive(Relation::Related, name, grids, 200, seed);
        PreparedWatershed::new(generate_watershed(&spec).unwrap(), 0.7).unwrap()
    }

    #[test]
    fn plan_mapping_is_fixed() {
        let p1 = make_transfer_plan(TransferMode::ZeroShot);
        assert_eq!((p1.frozen.clone(), p1.iterations), (FreezeMask::all(), 0));
        assert_eq!(p1.with_iterations(5).iterations, 0);
        assert!(make_transfer_plan(TransferMode::FullFinetune).frozen.is_empty());
        let p3 = make_transfer_plan(TransferMode::TemporalFinetune);
        assert_eq!(p3.frozen, FreezeMask::of(&[ParamGroup::Conv, ParamGroup::TargetBranch]));
        let p4 = make_transfer_plan(TransferMode::SpatialFinetune);
        assert_eq!(p4.frozen, FreezeMask::of(&[ParamGroup::Lstm]));
        for m in TransferMode::ALL {
            assert_eq!(TransferMode::parse(m.label()).unwrap(), m);
            let p = make_transfer_plan(m);
            assert_eq!(p.frozen.contains(ParamGroup::Head), m == TransferMode::ZeroShot);
        }
        assert!(TransferMode::parse("T-HD-5").is_err());
    }

    #[test]
    fn zero_shot_leaves_model_untouched() {
        let source = build_model(&small_arch(), 2).unwrap();
        let plan = make_transfer_plan(TransferMode::ZeroShot);
        let (m, report) = transfer_model(&source, &plan, &[], &TrainConfig::default()).unwrap();
        assert_eq!(m.to_checkpoint_bytes(), source.to_checkpoint_bytes());
        assert!(report.losses.is_empty());
        let plan = make_transfer_plan(TransferMode::FullFinetune);
        assert!(matches!(
            transfer_model(&source, &plan, &[], &TrainConfig::default()),
            Err(TransferError::NoTargetSamples { .. })
        ));
    }

    #[test]
    fn full_finetune_does_not_worsen_its_start() {
        let source = build_model(&small_arch(), 3).unwrap();
        let target = watershed("t", 4, 5);
        let labels: Vec<f64> = target.train.iter().map(|s| s.label).collect();
        let preds: Vec<f64> = target.train.iter().map(|s| source.forward(s).unwrap()).collect();
        let start = mse_loss(&preds, &labels).unwrap();
        let plan = make_transfer_plan(TransferMode::FullFinetune).with_iterations(5);
        let (_, report) = transfer_model(&source, &plan, &target.train, &TrainConfig::default()).unwrap();
        let best = report.losses.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(best <= start, "{best} > {start}");
    }

    #[test]
    fn matrix_shape_csv_and_determinism() {
        let source = build_model(&small_arch(), 4).unwrap();
        let targets = vec![watershed("a", 2, 1), watershed("b", 5, 2)];
        let config = MatrixConfig {
            finetune_iterations: 2,
            ..MatrixConfig::default()
        };
        let serial = run_transfer_matrix(&source, &targets, &TransferMode::ALL, &config).unwrap();
        assert_eq!(serial.cells.len(), 10);
        let parallel = run_transfer_matrix(
            &source,
            &targets,
            &TransferMode::ALL,
            &MatrixConfig {
                parallel: true,
                ..config
            },
        )
        .unwrap();
        assert_eq!(serial.to_csv_without_timing(), parallel.to_csv_without_timing());
        let csv = serial.to_csv();
        assert!(csv.starts_with("target,grids,mode,nse,rmse,train_seconds\n"));
        assert_eq!(csv.lines().count(), 11);
        let table = serial.to_table();
        assert_eq!(table.matches('*').count(), 2);
        for t in serial.targets() {
            let best = serial.best(t).unwrap();
            let max = serial.row(t).iter().map(|c| c.eval.nse).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(serial.cell(t, best).unwrap().eval.nse, max);
        }
        let zero = serial.cell("a", Column::Mode(TransferMode::ZeroShot)).unwrap();
        assert_eq!(zero.model, source);
    }
}
