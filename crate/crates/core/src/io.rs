//! File formats: JSON-lines score datasets, loss-matrix files, run
//! configuration and plot-ready CSV tables.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulate::{SweepEntry, TaskKind};
use crate::types::{ClassProbs, GridMask, LambdaGrid, LossMatrix, ProbGrid, QuantileTripleGrid};
use crate::validate::validate_loss_matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordKind {
    #[serde(rename = "CLASS_PROBS")]
    ClassProbs,
    #[serde(rename = "PROB_GRID")]
    ProbGrid,
    #[serde(rename = "QUANTILE_TRIPLE")]
    QuantileTriple,
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RecordKind::ClassProbs => "CLASS_PROBS",
            RecordKind::ProbGrid => "PROB_GRID",
            RecordKind::QuantileTriple => "QUANTILE_TRIPLE",
        })
    }
}

/// One line of a dataset file.
///
/// Grids are nested row arrays. A quantile triple payload is
/// `[q05, q50, q95]`; a segmentation label is a 0/1 grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ScoreRecord {
    #[serde(rename = "CLASS_PROBS")]
    ClassProbs {
        id: String,
        payload: Vec<f64>,
        label: usize,
    },
    #[serde(rename = "PROB_GRID")]
    ProbGrid {
        id: String,
        payload: Vec<Vec<f64>>,
        label: Vec<Vec<u8>>,
    },
    #[serde(rename = "QUANTILE_TRIPLE")]
    QuantileTriple {
        id: String,
        payload: [Vec<Vec<f64>>; 3],
        label: Vec<Vec<f64>>,
    },
}

impl ScoreRecord {
    pub fn kind(&self) -> RecordKind {
        match self {
            ScoreRecord::ClassProbs { .. } => RecordKind::ClassProbs,
            ScoreRecord::ProbGrid { .. } => RecordKind::ProbGrid,
            ScoreRecord::QuantileTriple { .. } => RecordKind::QuantileTriple,
        }
    }

    pub fn id(&self) -> &str {
        match self {
            ScoreRecord::ClassProbs { id, .. }
            | ScoreRecord::ProbGrid { id, .. }
            | ScoreRecord::QuantileTriple { id, .. } => id,
        }
    }
}

/// A parsed, validated dataset. All records share kind and dimensions.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Classification {
        ids: Vec<String>,
        probs: Vec<ClassProbs>,
        labels: Vec<usize>,
    },
    Segmentation {
        ids: Vec<String>,
        grids: Vec<ProbGrid>,
        masks: Vec<GridMask>,
    },
    Band {
        ids: Vec<String>,
        forecasts: Vec<QuantileTripleGrid>,
        truths: Vec<Array2<f64>>,
    },
}

impl Dataset {
    pub fn kind(&self) -> RecordKind {
        match self {
            Dataset::Classification { .. } => RecordKind::ClassProbs,
            Dataset::Segmentation { .. } => RecordKind::ProbGrid,
            Dataset::Band { .. } => RecordKind::QuantileTriple,
        }
    }

    pub fn ids(&self) -> &[String] {
        match self {
            Dataset::Classification { ids, .. } | Dataset::Segmentation { ids, .. } | Dataset::Band { ids, .. } => ids,
        }
    }

    pub fn len(&self) -> usize {
        self.ids().len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids().is_empty()
    }

    pub fn to_records(&self) -> Vec<ScoreRecord> {
        match self {
            Dataset::Classification { ids, probs, labels } => ids
                .iter()
                .zip(probs)
                .zip(labels)
                .map(|((id, p), &label)| ScoreRecord::ClassProbs {
                    id: id.clone(),
                    payload: p.as_slice().to_vec(),
                    label,
                })
                .collect(),
            Dataset::Segmentation { ids, grids, masks } => ids
                .iter()
                .zip(grids)
                .zip(masks)
                .map(|((id, g), m)| ScoreRecord::ProbGrid {
                    id: id.clone(),
                    payload: grid_rows(g.values()),
                    label: grid_rows(&m.cells().mapv(u8::from)),
                })
                .collect(),
            Dataset::Band { ids, forecasts, truths } => ids
                .iter()
                .zip(forecasts)
                .zip(truths)
                .map(|((id, f), t)| ScoreRecord::QuantileTriple {
                    id: id.clone(),
                    payload: [grid_rows(f.q05()), grid_rows(f.q50()), grid_rows(f.q95())],
                    label: grid_rows(t),
                })
                .collect(),
        }
    }
}

/// Row-major nested arrays, the on-disk grid layout.
pub fn grid_rows<T: Copy>(a: &Array2<T>) -> Vec<Vec<T>> {
    a.outer_iter().map(|row| row.to_vec()).collect()
}

fn from_nested<T: Copy>(rows: &[Vec<T>], id: &str, what: &str) -> Result<Array2<T>> {
    let invalid = |message: String| Error::InvalidRecord {
        id: id.to_string(),
        message,
    };
    let p = rows.len();
    let q = rows.first().map_or(0, Vec::len);
    if p == 0 || q == 0 {
        return Err(invalid(format!("{what} grid is empty")));
    }
    if rows.iter().any(|r| r.len() != q) {
        return Err(invalid(format!("{what} grid rows have unequal lengths")));
    }
    Array2::from_shape_vec((p, q), rows.iter().flatten().copied().collect()).map_err(|e| invalid(e.to_string()))
}

fn record_error(id: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        e @ Error::InvalidRecord { .. } => e,
        other => Error::InvalidRecord {
            id: id.to_string(),
            message: other.to_string(),
        },
    }
}

/// Dimensions records of one dataset must share.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Classes(usize),
    Grid(usize, usize),
}

/// Parses JSON-lines text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_dataset(text: &str, expected: RecordKind) -> Result<Dataset> {
    parse_lines(text.lines().map(|l| Ok(l.to_string())), expected)
}

/// Reads a JSON-lines dataset whose records must all be of kind `expected`.
pub fn load_dataset(path: &Path, expected: RecordKind) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    parse_lines(reader.lines().map(|l| l.map_err(Error::from)), expected)
}

fn parse_lines<I>(lines: I, expected: RecordKind) -> Result<Dataset>
where
    I: Iterator<Item = Result<String>>,
{
    let mut dataset = match expected {
        RecordKind::ClassProbs => Dataset::Classification {
            ids: vec![],
            probs: vec![],
            labels: vec![],
        },
        RecordKind::ProbGrid => Dataset::Segmentation {
            ids: vec![],
            grids: vec![],
            masks: vec![],
        },
        RecordKind::QuantileTriple => Dataset::Band {
            ids: vec![],
            forecasts: vec![],
            truths: vec![],
        },
    };
    let mut shape = None;
    let mut last_line = 0;
    for (index, line) in lines.enumerate() {
        let line_no = index + 1;
        last_line = line_no;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let found = value
            .get("kind")
            .and_then(|k| k.as_str())
            .unwrap_or("<missing>")
            .to_string();
        if found != expected.to_string() {
            let known = ["CLASS_PROBS", "PROB_GRID", "QUANTILE_TRIPLE"].contains(&found.as_str());
            if !known {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("unknown record kind {found:?}"),
                });
            }
            return Err(Error::KindMismatch {
                line: line_no,
                expected: expected.to_string(),
                found,
            });
        }
        let record: ScoreRecord = serde_json::from_value(value).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        push_record(&mut dataset, record, &mut shape, line_no)?;
    }
    if dataset.is_empty() {
        return Err(Error::Parse {
            line: last_line,
            message: "dataset contains no records".into(),
        });
    }
    Ok(dataset)
}

fn check_shape(shape: &mut Option<Shape>, found: Shape, line: usize, id: &str) -> Result<()> {
    match shape {
        None => {
            *shape = Some(found);
            Ok(())
        }
        Some(s) if *s == found => Ok(()),
        Some(s) => Err(Error::DimensionMismatch(format!(
            "line {line}, record {id}: shape {found:?} differs from earlier records' {s:?}"
        ))),
    }
}

fn push_record(dataset: &mut Dataset, record: ScoreRecord, shape: &mut Option<Shape>, line: usize) -> Result<()> {
    match (dataset, record) {
        (Dataset::Classification { ids, probs, labels }, ScoreRecord::ClassProbs { id, payload, label }) => {
            let p = ClassProbs::new(payload).map_err(record_error(&id))?;
            if label >= p.num_classes() {
                return Err(Error::InvalidRecord {
                    id,
                    message: format!("label {label} outside 0..{}", p.num_classes()),
                });
            }
            check_shape(shape, Shape::Classes(p.num_classes()), line, &id)?;
            ids.push(id);
            probs.push(p);
            labels.push(label);
        }
        (Dataset::Segmentation { ids, grids, masks }, ScoreRecord::ProbGrid { id, payload, label }) => {
            let grid = ProbGrid::new(from_nested(&payload, &id, "probability")?).map_err(record_error(&id))?;
            let cells = from_nested(&label, &id, "label")?;
            if cells.iter().any(|&c| c > 1) {
                return Err(Error::InvalidRecord {
                    id,
                    message: "label grid must contain only 0 and 1".into(),
                });
            }
            if cells.dim() != grid.dim() {
                return Err(Error::InvalidRecord {
                    id,
                    message: format!("label grid {:?} vs payload {:?}", cells.dim(), grid.dim()),
                });
            }
            let (p, q) = grid.dim();
            check_shape(shape, Shape::Grid(p, q), line, &id)?;
            masks.push(GridMask::new(cells.mapv(|c| c == 1)).map_err(record_error(&id))?);
            grids.push(grid);
            ids.push(id);
        }
        (Dataset::Band { ids, forecasts, truths }, ScoreRecord::QuantileTriple { id, payload, label }) => {
            let [lo, mid, hi] = &payload;
            let triple = QuantileTripleGrid::new(
                from_nested(lo, &id, "q05")?,
                from_nested(mid, &id, "q50")?,
                from_nested(hi, &id, "q95")?,
            )
            .map_err(record_error(&id))?;
            let truth = from_nested(&label, &id, "label")?;
            if truth.dim() != triple.dim() {
                return Err(Error::InvalidRecord {
                    id,
                    message: format!("label grid {:?} vs payload {:?}", truth.dim(), triple.dim()),
                });
            }
            if truth.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidRecord {
                    id,
                    message: "label values must be finite".into(),
                });
            }
            let (p, q) = triple.dim();
            check_shape(shape, Shape::Grid(p, q), line, &id)?;
            forecasts.push(triple);
            truths.push(truth);
            ids.push(id);
        }
        _ => unreachable!("record kind is checked before parsing"),
    }
    Ok(())
}

/// Writes one JSON record per line.
pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for record in dataset.to_records() {
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// A precomputed loss matrix: `rows[i][j]` is sample `i`'s loss at `grid[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossMatrixFile {
    pub grid: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
    #[serde(default = "unit_bound")]
    pub bound: f64,
}

fn unit_bound() -> f64 {
    1.0
}

impl LossMatrixFile {
    /// Fails with [`Error::NestingViolation`] when a row increases along the
    /// grid or leaves `[0, bound]`.
    pub fn into_matrix(self) -> Result<LossMatrix> {
        let matrix = LossMatrix::from_rows(&self.rows, LambdaGrid::new(self.grid)?, self.bound)?;
        let report = validate_loss_matrix(&matrix);
        if !report.is_empty() {
            return Err(Error::NestingViolation(report));
        }
        Ok(matrix)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

/// `min:max:step`, e.g. `0:1:0.01`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl GridSpec {
    pub fn to_grid(&self) -> Result<LambdaGrid> {
        LambdaGrid::arithmetic(self.min, self.max, self.step)
    }
}

impl FromStr for GridSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let [min, max, step] = parts.as_slice() else {
            return Err(Error::invalid(format!("grid spec {s:?} is not min:max:step")));
        };
        let num = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("grid spec {s:?}: {e}")))
        };
        let spec = Self {
            min: num(min)?,
            max: num(max)?,
            step: num(step)?,
        };
        if spec.step.is_nan() || spec.step <= 0.0 {
            return Err(Error::invalid(format!("grid step must be positive, got {}", spec.step)));
        }
        Ok(spec)
    }
}

/// Comma-separated numbers, e.g. `0.05,0.1`.
pub fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("list entry {v:?}: {e}")))
        })
        .collect()
}

/// Train/calibration/test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub calibration: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.64,
            calibration: 0.16,
            test: 0.20,
        }
    }
}

impl SplitFractions {
    pub fn new(train: f64, calibration: f64, test: f64) -> Result<Self> {
        let s = Self {
            train,
            calibration,
            test,
        };
        s.check()?;
        Ok(s)
    }

    pub fn check(&self) -> Result<()> {
        let parts = [self.train, self.calibration, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::invalid(format!(
                "split fractions must lie in [0, 1], got {parts:?}"
            )));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("split fractions must sum to 1, got {parts:?}")));
        }
        Ok(())
    }
}

/// How λ is searched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchSpec {
    Grid(GridSpec),
    Ladder { values: Vec<f64>, refine_points: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskKind,
    pub alpha: f64,
    pub delta: f64,
    pub search: SearchSpec,
    pub split: SplitFractions,
    pub seed: u64,
    pub trials: usize,
}

impl RunConfig {
    pub fn check(&self) -> Result<()> {
        crate::types::ControlConfig::new(self.alpha, self.delta)?;
        self.split.check()?;
        match &self.search {
            SearchSpec::Grid(g) if g.step.is_nan() || g.step <= 0.0 => {
                Err(Error::invalid(format!("grid step must be positive, got {}", g.step)))
            }
            SearchSpec::Ladder { values, .. } if values.is_empty() => Err(Error::EmptyInput("ladder")),
            _ => Ok(()),
        }
    }
}

/// One row per sweep entry with columns
/// `alpha, delta, exceedance_frequency, mean_loss, efficiency`.
pub fn write_sweep_csv<W: Write>(writer: W, entries: &[SweepEntry]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["alpha", "delta", "exceedance_frequency", "mean_loss", "efficiency"])?;
    for e in entries {
        csv.write_record([
            e.alpha.to_string(),
            e.delta.to_string(),
            e.report.exceedance_frequency.to_string(),
            e.report.mean_loss.to_string(),
            e.report.efficiency.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

/// Per-trial records of one sweep entry, for distribution plots.
pub fn write_trials_csv<W: Write>(writer: W, entries: &[SweepEntry]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record([
        "alpha",
        "delta",
        "trial",
        "lambda_star",
        "loss",
        "exceeded",
        "efficiency",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in entries {
        for r in &e.records {
            csv.write_record([
                e.alpha.to_string(),
                e.delta.to_string(),
                r.trial.to_string(),
                opt(r.lambda_star),
                opt(r.loss),
                r.exceeded.map(|b| b.to_string()).unwrap_or_default(),
                opt(r.efficiency),
            ])?;
        }
    }
    csv.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::TrialReport;
    use ndarray::array;

    fn class_line(id: &str, probs: &str, label: usize) -> String {
        format!(r#"{{"kind":"CLASS_PROBS","id":"{id}","payload":{probs},"label":{label}}}"#)
    }

    #[test]
    fn empty_text_is_a_parse_error() {
        for text in ["", "\n\n"] {
            let err = parse_dataset(text, RecordKind::ClassProbs).unwrap_err();
            assert_eq!(err.code(), "PARSE_ERROR");
        }
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let text = format!("{}\n{{not json\n", class_line("a", "[0.5,0.5]", 0));
        match parse_dataset(&text, RecordKind::ClassProbs).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_probabilities_name_the_record() {
        let text = class_line("rec-7", "[0.5,0.3]", 0);
        match parse_dataset(&text, RecordKind::ClassProbs).unwrap_err() {
            Error::InvalidRecord { id, .. } => assert_eq!(id, "rec-7"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn kind_and_dimension_mismatches() {
        let err = parse_dataset(&class_line("a", "[0.5,0.5]", 0), RecordKind::ProbGrid).unwrap_err();
        assert_eq!(err.code(), "KIND_MISMATCH");
        let text = format!(
            "{}\n{}",
            class_line("a", "[0.5,0.5]", 0),
            class_line("b", "[0.2,0.3,0.5]", 0)
        );
        assert_eq!(
            parse_dataset(&text, RecordKind::ClassProbs).unwrap_err().code(),
            "DIMENSION_MISMATCH"
        );
        let err = parse_dataset(r#"{"kind":"OTHER","id":"x"}"#, RecordKind::ClassProbs).unwrap_err();
        assert_eq!(err.code(), "PARSE_ERROR");
    }

    #[test]
    fn round_trip_every_kind() {
        let dir = tempfile::tempdir().unwrap();
        let datasets = [
            Dataset::Classification {
                ids: vec!["a".into(), "b".into()],
                probs: vec![
                    ClassProbs::new(vec![0.1, 0.2, 0.7]).unwrap(),
                    ClassProbs::new(vec![1.0 / 3.0; 3]).unwrap(),
                ],
                labels: vec![2, 0],
            },
            Dataset::Segmentation {
                ids: vec!["g".into()],
                grids: vec![ProbGrid::new(array![[0.1, 0.9], [0.5, 0.3]]).unwrap()],
                masks: vec![GridMask::new(array![[false, true], [true, false]]).unwrap()],
            },
            Dataset::Band {
                ids: vec!["t".into()],
                forecasts: vec![
                    QuantileTripleGrid::new(array![[0.0, 1.0]], array![[0.5, 1.5]], array![[1.0, 2.25]]).unwrap(),
                ],
                truths: vec![array![[0.7, -3.0]]],
            },
        ];
        for (i, d) in datasets.iter().enumerate() {
            let path = dir.path().join(format!("d{i}.jsonl"));
            save_dataset(&path, d).unwrap();
            assert_eq!(&load_dataset(&path, d.kind()).unwrap(), d);
        }
    }

    #[test]
    fn grid_spec_parsing() {
        let g: GridSpec = "0:1:0.25".parse().unwrap();
        assert_eq!(g.to_grid().unwrap().values(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!("0:1:0".parse::<GridSpec>().is_err());
        assert!("0:1".parse::<GridSpec>().is_err());
    }

    #[test]
    fn split_fractions_must_sum_to_one() {
        assert!(SplitFractions::default().check().is_ok());
        assert!(SplitFractions::new(0.5, 0.2, 0.2).is_err());
    }

    #[test]
    fn sweep_csv_has_one_row_per_pair() {
        let report = TrialReport::from_records(&[]);
        let entries: Vec<SweepEntry> = [(0.1, 0.1), (0.1, 0.2)]
            .iter()
            .map(|&(alpha, delta)| SweepEntry {
                alpha,
                delta,
                report: report.clone(),
                records: vec![],
            })
            .collect();
        let mut out = Vec::new();
        write_sweep_csv(&mut out, &entries).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "alpha,delta,exceedance_frequency,mean_loss,efficiency");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("0.1,0.2,"));
    }
}
