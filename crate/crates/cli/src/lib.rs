//! Command-line surface over the `clcp` library.
//!
//! Exit codes: 0 on success, 1 when `check-nesting` finds violations, 2 on a
//! library error (reported as `{"error": {"code", "message"}}` on stderr) and
//! 64 on a usage error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use clcp::io::{
    grid_rows, load_dataset, parse_list, save_dataset, write_json, write_sweep_csv, write_trials_csv, Dataset,
    GridSpec, LossMatrixFile, RecordKind,
};
use clcp::simulate::{
    run_sweep, BandTask, ClassificationTask, ClassificationTaskOptions, GridTaskOptions, Method, SegmentationTask,
    SweepEntry, TaskKind, TrialReport,
};
use clcp::{
    band_miscoverage_rate, check_nesting, check_set_sequence, clcp_search, compute_loss_matrix, crc_search,
    two_step_search, BandForecast, BandMiscoverage, CalibrationResult, ClassLossTable, ClassVarying, ControlConfig,
    Error, FalseNegativeRate, LabelSet, LambdaGrid, Miscoverage, NestedSet, NestingReport, QuantileBands, Result,
    SegmentationSets, SetLoss, SetPredictor, ThresholdLabelSets,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATIONS: i32 = 1;
pub const EXIT_ERROR: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(name = "clcp", version, about = "Conformal loss-controlling prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pick λ* from calibration data or a precomputed loss matrix.
    Calibrate(CalibrateArgs),
    /// Write the prediction set of every record at a given λ.
    Predict(PredictArgs),
    /// Per-record losses and efficiency at a given λ.
    Evaluate(EvaluateArgs),
    /// Monte Carlo check of the guarantee over an (alpha, delta) sweep.
    Simulate(SimulateArgs),
    /// Check that sets grow and losses fall along the grid.
    CheckNesting(CheckNestingArgs),
    /// Generate a synthetic task: model, calibration and test records.
    GenData(GenDataArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LossName {
    Miscoverage,
    ClassVarying,
    Fnr,
    BandMiscoverage,
}

impl LossName {
    fn kind(self) -> RecordKind {
        match self {
            LossName::Miscoverage | LossName::ClassVarying => RecordKind::ClassProbs,
            LossName::Fnr => RecordKind::ProbGrid,
            LossName::BandMiscoverage => RecordKind::QuantileTriple,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodName {
    Clcp,
    Crc,
}

impl From<MethodName> for Method {
    fn from(m: MethodName) -> Self {
        match m {
            MethodName::Clcp => Method::Clcp,
            MethodName::Crc => Method::Crc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskName {
    Classification,
    Segmentation,
    Band,
}

impl From<TaskName> for TaskKind {
    fn from(t: TaskName) -> Self {
        match t {
            TaskName::Classification => TaskKind::Classification,
            TaskName::Segmentation => TaskKind::Segmentation,
            TaskName::Band => TaskKind::Band,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KindName {
    ClassProbs,
    ProbGrid,
    QuantileTriple,
}

impl From<KindName> for RecordKind {
    fn from(k: KindName) -> Self {
        match k {
            KindName::ClassProbs => RecordKind::ClassProbs,
            KindName::ProbGrid => RecordKind::ProbGrid,
            KindName::QuantileTriple => RecordKind::QuantileTriple,
        }
    }
}

#[derive(Debug, Args)]
struct LossArgs {
    #[arg(long, value_enum, default_value = "miscoverage")]
    loss: LossName,
    /// Per-class miss penalties in (0, 1] for `class-varying`, comma separated.
    #[arg(long)]
    class_losses: Option<String>,
}

impl LossArgs {
    fn table(&self) -> Result<ClassLossTable> {
        let raw = self
            .class_losses
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("--loss class-varying needs --class-losses".into()))?;
        ClassLossTable::new(parse_list(raw)?)
    }
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// JSON-lines calibration records.
    #[arg(long, conflicts_with = "loss_matrix", required_unless_present = "loss_matrix")]
    data: Option<PathBuf>,
    /// Precomputed loss matrix JSON: `{"grid": [...], "rows": [[...]], "bound": 1}`.
    #[arg(long)]
    loss_matrix: Option<PathBuf>,
    #[arg(long)]
    alpha: f64,
    #[arg(long)]
    delta: f64,
    /// `min:max:step`; defaults to `0:1:0.01` except for band-miscoverage,
    /// which uses the ladder search.
    #[arg(long, conflicts_with = "ladder")]
    grid: Option<GridSpec>,
    /// Descending coarse ladder for the two-step search, comma separated.
    #[arg(long)]
    ladder: Option<String>,
    #[arg(long, default_value_t = 100)]
    refine: usize,
    #[arg(long, value_enum, default_value = "clcp")]
    method: MethodName,
    #[command(flatten)]
    loss: LossArgs,
    /// Output path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    kind: KindName,
    #[arg(long)]
    lambda: f64,
    /// JSON-lines output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    lambda: f64,
    #[command(flatten)]
    loss: LossArgs,
    /// Also count records whose loss exceeds this level.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    task: TaskName,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value = "0.05,0.1,0.15,0.2")]
    alphas: String,
    #[arg(long, default_value = "0.05,0.1,0.15,0.2")]
    deltas: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Calibration set size; 200 for classification, 150 otherwise.
    #[arg(long)]
    n_calibration: Option<usize>,
    /// Samples generated before the train split.
    #[arg(long)]
    n_total: Option<usize>,
    #[arg(long, value_enum, default_value = "clcp")]
    method: MethodName,
    /// Also write per-trial records to `trials.csv`.
    #[arg(long)]
    per_trial: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct CheckNestingArgs {
    /// JSON-lines records evaluated along the grid.
    #[arg(long, conflicts_with = "sets", required_unless_present = "sets")]
    data: Option<PathBuf>,
    /// Explicit label-set sequence JSON, checked under miscoverage loss.
    #[arg(long)]
    sets: Option<PathBuf>,
    #[arg(long, default_value = "0:1:0.01")]
    grid: GridSpec,
    #[command(flatten)]
    loss: LossArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    task: TaskName,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    n_total: Option<usize>,
    /// Output directory for calibration.jsonl, test.jsonl, model.json and meta.json.
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` (program name first), runs the command and returns the exit
/// code. Errors are reported on stderr.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            let payload = serde_json::json!({"error": {"code": e.code(), "message": e.to_string()}});
            eprintln!("{payload}");
            EXIT_ERROR
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Calibrate(a) => calibrate(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Simulate(a) => simulate(a),
        Command::CheckNesting(a) => check_nesting_cmd(a),
        Command::GenData(a) => gen_data(a),
    }
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    match out {
        Some(path) => write_json(path, value),
        None => {
            let mut stdout = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut stdout, value)?;
            writeln!(stdout)?;
            Ok(())
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CalibrationOutput {
    pub method: Method,
    pub alpha: f64,
    pub delta: f64,
    pub n_calibration: usize,
    #[serde(flatten)]
    pub result: CalibrationResult,
    /// Ladder bracket of the two-step search, when one was used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bracket: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degenerate: Option<bool>,
}

fn search(matrix: &clcp::LossMatrix, method: Method, config: &ControlConfig) -> Result<CalibrationResult> {
    match method {
        Method::Clcp => clcp_search(matrix, config),
        Method::Crc => crc_search(matrix, config.alpha),
    }
}

fn grid_search<P, L>(
    inputs: &[P::Input],
    labels: &[L::Label],
    family: &P,
    loss: &L,
    grid: &LambdaGrid,
    method: Method,
    config: &ControlConfig,
) -> Result<CalibrationResult>
where
    P: SetPredictor,
    P::Input: Sized,
    L: SetLoss<Set = P::Set>,
    L::Label: Sized,
{
    let pairs: Vec<(&P::Input, &L::Label)> = inputs.iter().zip(labels).collect();
    let matrix = compute_loss_matrix(&pairs, family, loss, grid)?;
    search(&matrix, method, config)
}

fn calibrate(args: CalibrateArgs) -> Result<i32> {
    let config = ControlConfig::new(args.alpha, args.delta)?;
    let method = Method::from(args.method);
    let unit_grid = || {
        args.grid
            .map_or_else(|| Ok(LambdaGrid::unit_interval()), |g| g.to_grid())
    };
    let mut bracket = None;
    let mut degenerate = None;

    let (n, result) = if let Some(path) = &args.loss_matrix {
        let matrix = LossMatrixFile::load(path)?.into_matrix()?;
        (matrix.n_rows(), search(&matrix, method, &config)?)
    } else {
        let path = args.data.as_ref().expect("clap requires --data or --loss-matrix");
        let dataset = load_dataset(path, args.loss.loss.kind())?;
        let n = dataset.len();
        let result = match (dataset, args.loss.loss) {
            (Dataset::Classification { probs, labels, .. }, LossName::Miscoverage) => grid_search(
                &probs,
                &labels,
                &ThresholdLabelSets,
                &Miscoverage,
                &unit_grid()?,
                method,
                &config,
            )?,
            (Dataset::Classification { probs, labels, .. }, LossName::ClassVarying) => grid_search(
                &probs,
                &labels,
                &ThresholdLabelSets,
                &ClassVarying(args.loss.table()?),
                &unit_grid()?,
                method,
                &config,
            )?,
            (Dataset::Segmentation { grids, masks, .. }, _) => grid_search(
                &grids,
                &masks,
                &SegmentationSets,
                &FalseNegativeRate,
                &unit_grid()?,
                method,
                &config,
            )?,
            (Dataset::Band { forecasts, truths, .. }, _) => {
                let forecasts: Vec<BandForecast> = forecasts.into_iter().map(BandForecast::new).collect();
                if let Some(g) = args.grid {
                    grid_search(
                        &forecasts,
                        &truths,
                        &QuantileBands,
                        &BandMiscoverage,
                        &g.to_grid()?,
                        method,
                        &config,
                    )?
                } else {
                    if method != Method::Clcp {
                        return Err(Error::InvalidArgument(
                            "the ladder search supports only --method clcp".into(),
                        ));
                    }
                    let ladder = match &args.ladder {
                        Some(raw) => parse_list(raw)?,
                        None => clcp::simulate::default_ladder(),
                    };
                    let evaluate = |lambda: f64| {
                        forecasts
                            .iter()
                            .zip(&truths)
                            .map(|(f, t)| band_miscoverage_rate(t, &QuantileBands.predict(f, lambda)))
                            .collect::<Result<Vec<f64>>>()
                    };
                    let outcome = two_step_search(evaluate, BandMiscoverage.bound(), &config, &ladder, args.refine)?;
                    bracket = outcome.bracket;
                    degenerate = Some(outcome.degenerate);
                    outcome.result
                }
            }
            _ => unreachable!("dataset kind follows the loss"),
        };
        (n, result)
    };
    emit_json(
        args.out.as_deref(),
        &CalibrationOutput {
            method,
            alpha: args.alpha,
            delta: args.delta,
            n_calibration: n,
            result,
            bracket,
            degenerate,
        },
    )?;
    Ok(EXIT_OK)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
#[serde(untagged)]
enum PredictionRecord {
    Labels {
        id: String,
        set: Vec<usize>,
    },
    Mask {
        id: String,
        mask: Vec<Vec<u8>>,
    },
    Band {
        id: String,
        lower: Vec<Vec<f64>>,
        upper: Vec<Vec<f64>>,
    },
}

fn predict(args: PredictArgs) -> Result<i32> {
    check_lambda(args.lambda)?;
    let dataset = load_dataset(&args.data, args.kind.into())?;
    let lambda = args.lambda;
    let records: Vec<PredictionRecord> = match dataset {
        Dataset::Classification { ids, probs, .. } => ids
            .into_iter()
            .zip(&probs)
            .map(|(id, p)| PredictionRecord::Labels {
                id,
                set: ThresholdLabelSets.predict(p, lambda).members().to_vec(),
            })
            .collect(),
        Dataset::Segmentation { ids, grids, .. } => ids
            .into_iter()
            .zip(&grids)
            .map(|(id, g)| PredictionRecord::Mask {
                id,
                mask: grid_rows(&SegmentationSets.predict(g, lambda).cells().mapv(u8::from)),
            })
            .collect(),
        Dataset::Band { ids, forecasts, .. } => ids
            .into_iter()
            .zip(forecasts)
            .map(|(id, f)| {
                let band = QuantileBands.predict(&BandForecast::new(f), lambda);
                PredictionRecord::Band {
                    id,
                    lower: grid_rows(band.lower()),
                    upper: grid_rows(band.upper()),
                }
            })
            .collect(),
    };
    let mut buf = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    match &args.out {
        Some(path) => fs::write(path, buf)?,
        None => std::io::stdout().lock().write_all(&buf)?,
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RecordEvaluation {
    pub id: String,
    pub loss: f64,
    pub efficiency: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvaluationOutput {
    pub lambda: f64,
    pub mean_loss: f64,
    /// Mean set size, normalized mask size or mean interval length.
    pub efficiency: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exceedance_frequency: Option<f64>,
    pub records: Vec<RecordEvaluation>,
}

fn evaluate_each<P, L>(
    ids: Vec<String>,
    inputs: &[P::Input],
    labels: &[L::Label],
    family: &P,
    loss: &L,
    lambda: f64,
) -> Result<Vec<RecordEvaluation>>
where
    P: SetPredictor,
    P::Input: Sized,
    P::Set: NestedSet,
    L: SetLoss<Set = P::Set>,
    L::Label: Sized,
{
    ids.into_iter()
        .zip(inputs.iter().zip(labels))
        .map(|(id, (x, y))| {
            let set = family.predict(x, lambda);
            Ok(RecordEvaluation {
                id,
                loss: loss.loss(y, &set)?,
                efficiency: set.size(),
            })
        })
        .collect()
}

fn evaluate(args: EvaluateArgs) -> Result<i32> {
    check_lambda(args.lambda)?;
    let lambda = args.lambda;
    let dataset = load_dataset(&args.data, args.loss.loss.kind())?;
    let records = match (dataset, args.loss.loss) {
        (Dataset::Classification { ids, probs, labels }, LossName::Miscoverage) => {
            evaluate_each(ids, &probs, &labels, &ThresholdLabelSets, &Miscoverage, lambda)?
        }
        (Dataset::Classification { ids, probs, labels }, LossName::ClassVarying) => evaluate_each(
            ids,
            &probs,
            &labels,
            &ThresholdLabelSets,
            &ClassVarying(args.loss.table()?),
            lambda,
        )?,
        (Dataset::Segmentation { ids, grids, masks }, _) => {
            evaluate_each(ids, &grids, &masks, &SegmentationSets, &FalseNegativeRate, lambda)?
        }
        (Dataset::Band { ids, forecasts, truths }, _) => {
            let forecasts: Vec<BandForecast> = forecasts.into_iter().map(BandForecast::new).collect();
            evaluate_each(ids, &forecasts, &truths, &QuantileBands, &BandMiscoverage, lambda)?
        }
        _ => unreachable!("dataset kind follows the loss"),
    };
    let n = records.len() as f64;
    let mean_loss = records.iter().map(|r| r.loss).sum::<f64>() / n;
    let efficiency = records.iter().map(|r| r.efficiency).sum::<f64>() / n;
    let exceedance_frequency = args
        .alpha
        .map(|a| records.iter().filter(|r| r.loss > a).count() as f64 / n);
    emit_json(
        args.out.as_deref(),
        &EvaluationOutput {
            lambda,
            mean_loss,
            efficiency,
            alpha: args.alpha,
            exceedance_frequency,
            records,
        },
    )?;
    Ok(EXIT_OK)
}

/// `report.json` written by `simulate`.
#[derive(Debug, Serialize, Deserialize)]
pub struct SimulationReport {
    pub task: TaskKind,
    pub method: Method,
    pub seed: u64,
    pub trials: usize,
    pub n_calibration: usize,
    pub pool_size: usize,
    pub entries: Vec<SimulationEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SimulationEntry {
    pub alpha: f64,
    pub delta: f64,
    #[serde(flatten)]
    pub report: TrialReport,
}

/// Seed of the trial draws; the task data uses `seed` itself.
pub fn trial_seed(seed: u64) -> u64 {
    seed.wrapping_add(1)
}

fn simulate(args: SimulateArgs) -> Result<i32> {
    let alphas = parse_list(&args.alphas)?;
    let deltas = parse_list(&args.deltas)?;
    let task = TaskKind::from(args.task);
    let method = Method::from(args.method);
    let n = args
        .n_calibration
        .unwrap_or(if task == TaskKind::Classification { 200 } else { 150 });
    let sweep = |scenario: &dyn clcp::simulate::Scenario| -> Result<(usize, Vec<SweepEntry>)> {
        let entries = run_sweep(
            scenario,
            method,
            &alphas,
            &deltas,
            n,
            args.trials,
            trial_seed(args.seed),
        )?;
        Ok((scenario.pool_size(), entries))
    };
    let (pool_size, entries) = match task {
        TaskKind::Classification => {
            let mut opts = ClassificationTaskOptions::default();
            opts.n_total = args.n_total.unwrap_or(opts.n_total);
            sweep(&ClassificationTask::build(args.seed, &opts)?.scenario()?)?
        }
        TaskKind::Segmentation => {
            let mut opts = GridTaskOptions::segmentation();
            opts.n_total = args.n_total.unwrap_or(opts.n_total);
            sweep(&SegmentationTask::build(args.seed, &opts)?.scenario()?)?
        }
        TaskKind::Band => {
            let mut opts = GridTaskOptions::band();
            opts.n_total = args.n_total.unwrap_or(opts.n_total);
            sweep(&BandTask::build(args.seed, &opts)?.scenario()?)?
        }
    };

    fs::create_dir_all(&args.out_dir)?;
    let report = SimulationReport {
        task,
        method,
        seed: args.seed,
        trials: args.trials,
        n_calibration: n,
        pool_size,
        entries: entries
            .iter()
            .map(|e| SimulationEntry {
                alpha: e.alpha,
                delta: e.delta,
                report: e.report.clone(),
            })
            .collect(),
    };
    write_json(&args.out_dir.join("report.json"), &report)?;
    write_sweep_csv(fs::File::create(args.out_dir.join("table.csv"))?, &entries)?;
    if args.per_trial {
        write_trials_csv(fs::File::create(args.out_dir.join("trials.csv"))?, &entries)?;
    }
    Ok(EXIT_OK)
}

/// Explicit label sets for `check-nesting --sets`, one per grid value.
#[derive(Debug, Serialize, Deserialize)]
pub struct SetSequenceFile {
    pub num_classes: usize,
    pub label: usize,
    pub grid: Vec<f64>,
    pub sets: Vec<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NestingOutput {
    pub checked: usize,
    pub violating: usize,
    pub records: Vec<NestingRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NestingRecord {
    pub id: String,
    #[serde(flatten)]
    pub report: NestingReport,
}

fn nesting_each<P, L>(
    ids: &[String],
    inputs: &[P::Input],
    labels: &[L::Label],
    family: &P,
    loss: &L,
    grid: &LambdaGrid,
) -> Vec<NestingRecord>
where
    P: SetPredictor,
    P::Input: Sized,
    L: SetLoss<Set = P::Set>,
    L::Label: Sized,
{
    ids.iter()
        .zip(inputs.iter().zip(labels))
        .map(|(id, (x, y))| NestingRecord {
            id: id.clone(),
            report: check_nesting(family, loss, x, y, grid),
        })
        .collect()
}

fn check_nesting_cmd(args: CheckNestingArgs) -> Result<i32> {
    let checked;
    let records = if let Some(path) = &args.sets {
        let file: SetSequenceFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        let grid = LambdaGrid::new(file.grid)?;
        if file.sets.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} sets for {} grid values",
                file.sets.len(),
                grid.len()
            )));
        }
        if file.label >= file.num_classes {
            return Err(Error::InvalidArgument(format!(
                "label {} outside 0..{}",
                file.label, file.num_classes
            )));
        }
        let sets = file
            .sets
            .into_iter()
            .map(|m| LabelSet::new(m, file.num_classes))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&LabelSet> = sets.iter().collect();
        checked = 1;
        vec![NestingRecord {
            id: path.display().to_string(),
            report: check_set_sequence(&refs, &Miscoverage, &file.label, &grid),
        }]
    } else {
        let path = args.data.as_ref().expect("clap requires --data or --sets");
        let grid = args.grid.to_grid()?;
        let dataset = load_dataset(path, args.loss.loss.kind())?;
        checked = dataset.len();
        match (dataset, args.loss.loss) {
            (Dataset::Classification { ids, probs, labels }, LossName::Miscoverage) => {
                nesting_each(&ids, &probs, &labels, &ThresholdLabelSets, &Miscoverage, &grid)
            }
            (Dataset::Classification { ids, probs, labels }, LossName::ClassVarying) => nesting_each(
                &ids,
                &probs,
                &labels,
                &ThresholdLabelSets,
                &ClassVarying(args.loss.table()?),
                &grid,
            ),
            (Dataset::Segmentation { ids, grids, masks }, _) => {
                nesting_each(&ids, &grids, &masks, &SegmentationSets, &FalseNegativeRate, &grid)
            }
            (Dataset::Band { ids, forecasts, truths }, _) => {
                let forecasts: Vec<BandForecast> = forecasts.into_iter().map(BandForecast::new).collect();
                nesting_each(&ids, &forecasts, &truths, &QuantileBands, &BandMiscoverage, &grid)
            }
            _ => unreachable!("dataset kind follows the loss"),
        }
    };
    let violating: Vec<NestingRecord> = records.into_iter().filter(|r| !r.report.is_empty()).collect();
    let output = NestingOutput {
        checked,
        violating: violating.len(),
        records: violating,
    };
    emit_json(args.out.as_deref(), &output)?;
    Ok(if output.violating == 0 {
        EXIT_OK
    } else {
        EXIT_VIOLATIONS
    })
}

/// `meta.json` written by `gen-data`.
#[derive(Debug, Serialize, Deserialize)]
pub struct GenDataMeta {
    pub task: TaskKind,
    pub seed: u64,
    pub kind: RecordKind,
    pub calibration_records: usize,
    pub test_records: usize,
    /// Per-class miss penalties of the classification task.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_losses: Option<Vec<f64>>,
}

fn ids(prefix: &str, range: std::ops::Range<usize>) -> Vec<String> {
    range.map(|i| format!("{prefix}-{i:05}")).collect()
}

/// Calibration share of the non-training pool under the default
/// 0.64/0.16/0.20 split.
const CALIBRATION_SHARE: f64 = 0.16 / 0.36;

fn gen_data(args: GenDataArgs) -> Result<i32> {
    fs::create_dir_all(&args.out)?;
    let task = TaskKind::from(args.task);
    let split = |len: usize| (len as f64 * CALIBRATION_SHARE).round() as usize;
    let (calibration, test, class_losses) = match task {
        TaskKind::Classification => {
            let mut opts = ClassificationTaskOptions::default();
            opts.n_total = args.n_total.unwrap_or(opts.n_total);
            let t = ClassificationTask::build(args.seed, &opts)?;
            t.model.save(&args.out.join("model.json"))?;
            let c = split(t.pool_labels.len());
            let len = t.pool_labels.len();
            (
                Dataset::Classification {
                    ids: ids("cal", 0..c),
                    probs: t.pool_probs[..c].to_vec(),
                    labels: t.pool_labels[..c].to_vec(),
                },
                Dataset::Classification {
                    ids: ids("test", c..len),
                    probs: t.pool_probs[c..].to_vec(),
                    labels: t.pool_labels[c..].to_vec(),
                },
                Some(t.loss_table.penalties().to_vec()),
            )
        }
        TaskKind::Segmentation => {
            let mut opts = GridTaskOptions::segmentation();
            opts.n_total = args.n_total.unwrap_or(opts.n_total);
            let t = SegmentationTask::build(args.seed, &opts)?;
            t.model.save(&args.out.join("model.json"))?;
            let len = t.pool_masks.len();
            let c = split(len);
            (
                Dataset::Segmentation {
                    ids: ids("cal", 0..c),
                    grids: t.pool_grids[..c].to_vec(),
                    masks: t.pool_masks[..c].to_vec(),
                },
                Dataset::Segmentation {
                    ids: ids("test", c..len),
                    grids: t.pool_grids[c..].to_vec(),
                    masks: t.pool_masks[c..].to_vec(),
                },
                None,
            )
        }
        TaskKind::Band => {
            let mut opts = GridTaskOptions::band();
            opts.n_total = args.n_total.unwrap_or(opts.n_total);
            let t = BandTask::build(args.seed, &opts)?;
            t.model.save(&args.out.join("model.json"))?;
            let len = t.pool_truths.len();
            let c = split(len);
            let triples: Vec<_> = t.pool_forecasts.into_iter().map(|f| f.triple).collect();
            (
                Dataset::Band {
                    ids: ids("cal", 0..c),
                    forecasts: triples[..c].to_vec(),
                    truths: t.pool_truths[..c].to_vec(),
                },
                Dataset::Band {
                    ids: ids("test", c..len),
                    forecasts: triples[c..].to_vec(),
                    truths: t.pool_truths[c..].to_vec(),
                },
                None,
            )
        }
    };
    save_dataset(&args.out.join("calibration.jsonl"), &calibration)?;
    save_dataset(&args.out.join("test.jsonl"), &test)?;
    write_json(
        &args.out.join("meta.json"),
        &GenDataMeta {
            task,
            seed: args.seed,
            kind: calibration.kind(),
            calibration_records: calibration.len(),
            test_records: test.len(),
            class_losses,
        },
    )?;
    Ok(EXIT_OK)
}
