//! Set-valued losses, all bounded in `[0, 1]` and non-increasing as the
//! prediction set grows, plus assembly of loss matrices.

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::predictors::{BandForecast, SetPredictor};
use crate::types::{Band, GridMask, LabelSet, LambdaGrid, LossMatrix};
use crate::validate::validate_loss_matrix;

/// Bound `B` shared by every built-in loss.
pub const UNIT_BOUND: f64 = 1.0;

/// A loss `L(y, C)` that never increases when `C` grows and never exceeds
/// [`SetLoss::bound`].
pub trait SetLoss {
    type Label: ?Sized;
    type Set;

    fn bound(&self) -> f64;

    fn loss(&self, label: &Self::Label, set: &Self::Set) -> Result<f64>;
}

/// Per-class penalties `L_y` for leaving class `y` out of the set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassLossTable(Vec<f64>);

impl ClassLossTable {
    pub fn new(penalties: Vec<f64>) -> Result<Self> {
        if penalties.is_empty() {
            return Err(Error::EmptyInput("class loss table"));
        }
        if let Some(p) = penalties.iter().find(|p| !(**p > 0.0 && **p <= UNIT_BOUND)) {
            return Err(Error::invalid(format!("class penalty {p} outside (0, 1]")));
        }
        Ok(Self(penalties))
    }

    pub fn penalties(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }
}

pub fn miscoverage_loss(label: usize, set: &LabelSet) -> f64 {
    if set.contains(label) {
        0.0
    } else {
        1.0
    }
}

/// `L_y · 1{y ∉ C}`.
pub fn class_varying_loss(label: usize, set: &LabelSet, table: &ClassLossTable) -> f64 {
    if set.contains(label) {
        0.0
    } else {
        table.0[label]
    }
}

/// `1 - |y ∩ C| / |y|`: the fraction of true positive cells the mask misses.
pub fn fnr_loss(truth: &GridMask, pred: &GridMask) -> Result<f64> {
    let positives = truth.count();
    if positives == 0 {
        return Err(Error::EmptyTruth);
    }
    let hit = truth.intersection_count(pred)?;
    Ok(1.0 - hit as f64 / positives as f64)
}

/// Fraction of cells whose true value falls outside the closed band interval.
pub fn band_miscoverage_rate(truth: &Array2<f64>, band: &Band) -> Result<f64> {
    if truth.dim() != band.dim() {
        return Err(Error::DimensionMismatch(format!(
            "truth field {:?} vs band {:?}",
            truth.dim(),
            band.dim()
        )));
    }
    let missed = Zip::from(truth)
        .and(band.lower())
        .and(band.upper())
        .fold(0usize, |acc, &y, &l, &u| acc + usize::from(!(l <= y && y <= u)));
    Ok(missed as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Miscoverage;

impl SetLoss for Miscoverage {
    type Label = usize;
    type Set = LabelSet;

    fn bound(&self) -> f64 {
        UNIT_BOUND
    }

    fn loss(&self, label: &usize, set: &LabelSet) -> Result<f64> {
        check_label(*label, set.num_classes())?;
        Ok(miscoverage_loss(*label, set))
    }
}

#[derive(Debug, Clone)]
pub struct ClassVarying(pub ClassLossTable);

impl SetLoss for ClassVarying {
    type Label = usize;
    type Set = LabelSet;

    fn bound(&self) -> f64 {
        UNIT_BOUND
    }

    fn loss(&self, label: &usize, set: &LabelSet) -> Result<f64> {
        check_label(*label, self.0.num_classes())?;
        if set.num_classes() != self.0.num_classes() {
            return Err(Error::DimensionMismatch(format!(
                "label set over {} classes, loss table over {}",
                set.num_classes(),
                self.0.num_classes()
            )));
        }
        Ok(class_varying_loss(*label, set, &self.0))
    }
}

fn check_label(label: usize, num_classes: usize) -> Result<()> {
    if label >= num_classes {
        return Err(Error::invalid(format!("label {label} outside 0..{num_classes}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FalseNegativeRate;

impl SetLoss for FalseNegativeRate {
    type Label = GridMask;
    type Set = GridMask;

    fn bound(&self) -> f64 {
        UNIT_BOUND
    }

    fn loss(&self, label: &GridMask, set: &GridMask) -> Result<f64> {
        fnr_loss(label, set)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BandMiscoverage;

impl SetLoss for BandMiscoverage {
    type Label = Array2<f64>;
    type Set = Band;

    fn bound(&self) -> f64 {
        UNIT_BOUND
    }

    fn loss(&self, label: &Array2<f64>, set: &Band) -> Result<f64> {
        band_miscoverage_rate(label, set)
    }
}

/// Builds `entries[i][j] = L(y_i, C_{λ_j}(x_i))` and checks it.
///
/// Fails with [`Error::NestingViolation`] when a row is not monotone or leaves
/// `[0, B]`, which means the predictor/loss pairing is broken.
pub fn compute_loss_matrix<P, L>(
    samples: &[(&P::Input, &L::Label)],
    family: &P,
    loss: &L,
    grid: &LambdaGrid,
) -> Result<LossMatrix>
where
    P: SetPredictor,
    L: SetLoss<Set = P::Set>,
{
    let n = samples.len();
    let mut entries = vec![0.0; n * grid.len()];
    for (i, (input, label)) in samples.iter().enumerate() {
        for (j, &lambda) in grid.values().iter().enumerate() {
            let set = family.predict(input, lambda);
            entries[j * n + i] = loss.loss(label, &set)?;
        }
    }
    let matrix = LossMatrix::from_column_major(entries, n, grid.clone(), loss.bound())?;
    let report = validate_loss_matrix(&matrix);
    if !report.is_empty() {
        return Err(Error::NestingViolation(report));
    }
    Ok(matrix)
}

/// Band miscoverage of one sample as a step function of λ.
///
/// Each cell is covered once λ reaches `(q50 - y)/Δ⁻` (below the median) or
/// `(y - q50)/Δ⁺` (above it), so the loss at λ is the fraction of thresholds
/// above λ. Matches [`band_miscoverage_rate`] except where λ equals a
/// threshold up to rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMissProfile {
    thresholds: Vec<f64>,
}

impl BandMissProfile {
    pub fn new(forecast: &BandForecast, truth: &Array2<f64>) -> Result<Self> {
        if truth.dim() != forecast.triple.dim() {
            return Err(Error::DimensionMismatch(format!(
                "truth field {:?} vs forecast {:?}",
                truth.dim(),
                forecast.triple.dim()
            )));
        }
        let mut thresholds: Vec<f64> = Zip::from(truth)
            .and(forecast.triple.q50())
            .and(forecast.scale.delta_minus())
            .and(forecast.scale.delta_plus())
            .map_collect(|&y, &m, &dm, &dp| {
                if y < m {
                    (m - y) / dm
                } else if y > m {
                    (y - m) / dp
                } else {
                    0.0
                }
            })
            .into_iter()
            .collect();
        thresholds.sort_by(f64::total_cmp);
        Ok(Self { thresholds })
    }

    pub fn loss_at(&self, lambda: f64) -> f64 {
        let covered = self.thresholds.partition_point(|&t| t <= lambda);
        (self.thresholds.len() - covered) as f64 / self.thresholds.len() as f64
    }
}
