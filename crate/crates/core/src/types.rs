//! Domain types shared across calibration, predictors, losses and simulation.
//!
//! Everything here is immutable after construction and validated by its
//! constructor, so downstream code can rely on the stated invariants.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when checking that a grid is arithmetic.
const STEP_TOLERANCE: f64 = 1e-9;

/// Tolerance on the sum of class probabilities.
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

/// Finite, strictly increasing set of candidate values for the nesting
/// parameter λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    values: Vec<f64>,
    step: Option<f64>,
}

impl LambdaGrid {
    /// Grid from explicit values. No common step is recorded.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        Self::check_values(&values)?;
        Ok(Self { values, step: None })
    }

    /// Arithmetic grid `min, min + step, ...` up to and including `max`
    /// (within rounding).
    pub fn arithmetic(min: f64, max: f64, step: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && step.is_finite()) {
            return Err(Error::invalid("grid bounds and step must be finite"));
        }
        if step <= 0.0 {
            return Err(Error::invalid(format!("grid step must be positive, got {step}")));
        }
        if max < min {
            return Err(Error::invalid(format!("grid max {max} is below min {min}")));
        }
        let intervals = ((max - min) / step + STEP_TOLERANCE).floor() as usize;
        let values = (0..=intervals).map(|j| min + j as f64 * step).collect();
        Self::with_step(values, step)
    }

    /// Explicit values that are claimed to share the common difference `step`.
    pub fn with_step(values: Vec<f64>, step: f64) -> Result<Self> {
        Self::check_values(&values)?;
        if !(step.is_finite() && step > 0.0) {
            return Err(Error::invalid(format!("grid step must be positive, got {step}")));
        }
        for pair in values.windows(2) {
            let diff = pair[1] - pair[0];
            // relative tolerance on the step, plus rounding noise of the values themselves
            let tol = STEP_TOLERANCE * step + 4.0 * f64::EPSILON * pair[0].abs().max(pair[1].abs());
            if (diff - step).abs() > tol {
                return Err(Error::invalid(format!(
                    "grid is not arithmetic: difference {diff} between {} and {} differs from step {step}",
                    pair[0], pair[1]
                )));
            }
        }
        Ok(Self {
            values,
            step: Some(step),
        })
    }

    /// λ from 0 to 1 with step 0.01, the default for probability thresholds.
    pub fn unit_interval() -> Self {
        Self::arithmetic(0.0, 1.0, 0.01).expect("static grid is valid")
    }

    fn check_values(values: &[f64]) -> Result<()> {
        if values.is_empty() {
            return Err(Error::EmptyInput("lambda grid"));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("grid value {bad} is not finite")));
        }
        if let Some(pair) = values.windows(2).find(|p| p[1] <= p[0]) {
            return Err(Error::invalid(format!(
                "grid must be strictly increasing, found {} then {}",
                pair[0], pair[1]
            )));
        }
        Ok(())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn step(&self) -> Option<f64> {
        self.step
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }
}

/// Target loss level `alpha` and risk level `delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlConfig {
    pub alpha: f64,
    pub delta: f64,
}

impl ControlConfig {
    pub fn new(alpha: f64, delta: f64) -> Result<Self> {
        if !alpha.is_finite() {
            return Err(Error::invalid(format!("alpha must be finite, got {alpha}")));
        }
        check_delta(delta)?;
        Ok(Self { alpha, delta })
    }

    /// Calibration additionally needs `delta > 1/(n+1)`.
    pub fn check_sample_size(&self, n: usize) -> Result<()> {
        let min = 1.0 / (n as f64 + 1.0);
        if self.delta <= min {
            return Err(Error::DeltaTooSmall {
                delta: self.delta,
                n,
                min,
            });
        }
        Ok(())
    }
}

pub(crate) fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

/// Per-sample loss curves `L_i(λ_j)` on a shared grid, with loss bound `B`.
///
/// Stored column-major: calibration scans columns, one λ at a time. The
/// constructor only checks shapes and finiteness; monotonicity and the bound
/// are checked by [`crate::validate::validate_loss_matrix`].
#[derive(Debug, Clone, PartialEq)]
pub struct LossMatrix {
    grid: LambdaGrid,
    bound: f64,
    rows: usize,
    entries: Vec<f64>,
}

impl LossMatrix {
    pub fn from_rows(rows: &[Vec<f64>], grid: LambdaGrid, bound: f64) -> Result<Self> {
        let m = grid.len();
        if let Some((i, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != m) {
            return Err(Error::DimensionMismatch(format!(
                "row {i} has {} entries but the grid has {m} values",
                row.len()
            )));
        }
        let n = rows.len();
        let mut entries = vec![0.0; n * m];
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                entries[j * n + i] = v;
            }
        }
        Self::from_column_major(entries, n, grid, bound)
    }

    /// `entries[j * rows + i]` holds `L_i(λ_j)`.
    pub fn from_column_major(entries: Vec<f64>, rows: usize, grid: LambdaGrid, bound: f64) -> Result<Self> {
        if rows == 0 {
            return Err(Error::EmptyInput("loss matrix has no rows"));
        }
        if entries.len() != rows * grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} entries do not form {rows} rows over {} grid values",
                entries.len(),
                grid.len()
            )));
        }
        if !bound.is_finite() {
            return Err(Error::invalid(format!("loss bound must be finite, got {bound}")));
        }
        if let Some(bad) = entries.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("loss value {bad} is not finite")));
        }
        Ok(Self {
            grid,
            bound,
            rows,
            entries,
        })
    }

    pub fn grid(&self) -> &LambdaGrid {
        &self.grid
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn n_rows(&self) -> usize {
        self.rows
    }

    pub fn n_cols(&self) -> usize {
        self.grid.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[col * self.rows + row]
    }

    pub fn column(&self, col: usize) -> &[f64] {
        &self.entries[col * self.rows..(col + 1) * self.rows]
    }

    pub fn row(&self, row: usize) -> Vec<f64> {
        (0..self.n_cols()).map(|j| self.get(row, j)).collect()
    }

    /// Sub-matrix made of the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("row selection"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.rows) {
            return Err(Error::DimensionMismatch(format!(
                "row {bad} out of range for {} rows",
                self.rows
            )));
        }
        let mut entries = Vec::with_capacity(rows.len() * self.n_cols());
        for j in 0..self.n_cols() {
            let col = self.column(j);
            entries.extend(rows.iter().map(|&r| col[r]));
        }
        Ok(Self {
            grid: self.grid.clone(),
            bound: self.bound,
            rows: rows.len(),
            entries,
        })
    }
}

/// Estimated class probabilities `f_k(x)` for one input.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassProbs(Vec<f64>);

impl ClassProbs {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyInput("class probabilities"));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("class probability {p} outside [0, 1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(Error::invalid(format!("class probabilities sum to {sum}, not 1")));
        }
        Ok(Self(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }
}

/// Per-cell event probabilities on a P×Q grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbGrid(Array2<f64>);

impl ProbGrid {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        check_nonempty_grid(&values)?;
        if let Some(p) = values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("cell probability {p} outside [0, 1]")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }
}

fn check_nonempty_grid<T>(values: &Array2<T>) -> Result<()> {
    let (p, q) = values.dim();
    if p == 0 || q == 0 {
        return Err(Error::EmptyInput("grid field"));
    }
    Ok(())
}

fn check_same_dim<A, B>(a: &Array2<A>, b: &Array2<B>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Binary membership of each grid cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMask(Array2<bool>);

impl GridMask {
    pub fn new(cells: Array2<bool>) -> Result<Self> {
        check_nonempty_grid(&cells)?;
        Ok(Self(cells))
    }

    pub fn cells(&self) -> &Array2<bool> {
        &self.0
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&c| c).count()
    }

    /// Number of cells set in both masks.
    pub fn intersection_count(&self, other: &GridMask) -> Result<usize> {
        check_same_dim(&self.0, &other.0, "mask intersection")?;
        Ok(Zip::from(&self.0)
            .and(&other.0)
            .fold(0, |acc, &a, &b| acc + usize::from(a && b)))
    }

    /// Fraction of cells in the mask, `|C| / (P·Q)`.
    pub fn normalized_size(&self) -> f64 {
        self.count() as f64 / self.0.len() as f64
    }
}

/// Point-wise 0.05 / 0.5 / 0.95 quantile forecasts.
///
/// Constructing from crossing quantiles sorts each cell's triple.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileTripleGrid {
    q05: Array2<f64>,
    q50: Array2<f64>,
    q95: Array2<f64>,
}

impl QuantileTripleGrid {
    pub fn new(mut q05: Array2<f64>, mut q50: Array2<f64>, mut q95: Array2<f64>) -> Result<Self> {
        check_nonempty_grid(&q50)?;
        check_same_dim(&q05, &q50, "q05 vs q50")?;
        check_same_dim(&q95, &q50, "q95 vs q50")?;
        if q05.iter().chain(q50.iter()).chain(q95.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("quantile forecasts must be finite"));
        }
        Zip::from(&mut q05).and(&mut q50).and(&mut q95).for_each(|a, b, c| {
            let mut t = [*a, *b, *c];
            t.sort_by(f64::total_cmp);
            [*a, *b, *c] = t;
        });
        Ok(Self { q05, q50, q95 })
    }

    pub fn q05(&self) -> &Array2<f64> {
        &self.q05
    }

    pub fn q50(&self) -> &Array2<f64> {
        &self.q50
    }

    pub fn q95(&self) -> &Array2<f64> {
        &self.q95
    }

    pub fn dim(&self) -> (usize, usize) {
        self.q50.dim()
    }
}

/// Per-cell closed intervals `[lower, upper]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    lower: Array2<f64>,
    upper: Array2<f64>,
}

impl Band {
    pub fn new(lower: Array2<f64>, upper: Array2<f64>) -> Result<Self> {
        check_nonempty_grid(&lower)?;
        check_same_dim(&lower, &upper, "band bounds")?;
        let crossed = Zip::from(&lower)
            .and(&upper)
            .fold(false, |acc, l, u| acc || l.partial_cmp(u).is_none_or(|o| o.is_gt()));
        if crossed {
            return Err(Error::invalid("band lower bound exceeds upper bound"));
        }
        Ok(Self { lower, upper })
    }

    pub fn lower(&self) -> &Array2<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &Array2<f64> {
        &self.upper
    }

    pub fn dim(&self) -> (usize, usize) {
        self.lower.dim()
    }

    pub fn covers(&self, cell: (usize, usize), value: f64) -> bool {
        self.lower[cell] <= value && value <= self.upper[cell]
    }

    /// Mean interval width over the grid.
    pub fn mean_width(&self) -> f64 {
        Zip::from(&self.lower)
            .and(&self.upper)
            .fold(0.0, |acc, l, u| acc + (u - l))
            / self.lower.len() as f64
    }
}

/// Subset of the class indices `0..num_classes`, kept sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LabelSet {
    members: Vec<usize>,
    num_classes: usize,
}

impl LabelSet {
    pub fn new(mut members: Vec<usize>, num_classes: usize) -> Result<Self> {
        members.sort_unstable();
        if let Some(&bad) = members.iter().find(|&&m| m >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside 0..{num_classes}")));
        }
        if members.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("label set contains duplicates"));
        }
        Ok(Self { members, num_classes })
    }

    /// Members must already be sorted, unique and in range.
    pub(crate) fn from_sorted(members: Vec<usize>, num_classes: usize) -> Self {
        debug_assert!(members.windows(2).all(|w| w[0] < w[1]));
        debug_assert!(members.last().is_none_or(|&m| m < num_classes));
        Self { members, num_classes }
    }

    pub fn empty(num_classes: usize) -> Self {
        Self::from_sorted(Vec::new(), num_classes)
    }

    pub fn full(num_classes: usize) -> Self {
        Self::from_sorted((0..num_classes).collect(), num_classes)
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn contains(&self, label: usize) -> bool {
        self.members.binary_search(&label).is_ok()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Outcome of a successful λ search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub lambda_star: f64,
    /// Conformal loss quantile (or inflated risk, for CRC) at `lambda_star`.
    pub quantile_at_lambda_star: f64,
    /// Whether `min_λ max_i L_i(λ) <= alpha` holds on the calibration data.
    pub feasible: bool,
    /// Grid points evaluated before the search stopped.
    pub scanned: usize,
}
