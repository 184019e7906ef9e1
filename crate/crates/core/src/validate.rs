//! Checks for the two nesting properties everything else relies on: prediction
//! sets grow with λ, and losses shrink as sets grow.

use serde::{Deserialize, Serialize};

use crate::losses::SetLoss;
use crate::predictors::{NestedSet, SetPredictor};
use crate::types::{LambdaGrid, LossMatrix};

/// Absolute slack for monotonicity and range checks.
pub const MONOTONE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Violation {
    /// `L_row(λ_col) < L_row(λ_next)`: the loss went up as λ increased.
    Inversion {
        row: usize,
        col: usize,
        next_col: usize,
        value: f64,
        next_value: f64,
    },
    /// Loss outside `[0, B]`.
    OutOfRange { row: usize, col: usize, value: f64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Reports every non-monotone adjacent pair and every value outside `[0, B]`.
pub fn validate_loss_matrix(matrix: &LossMatrix) -> ValidationReport {
    let bound = matrix.bound();
    let mut violations = Vec::new();
    for i in 0..matrix.n_rows() {
        for j in 0..matrix.n_cols() {
            let value = matrix.get(i, j);
            if value < -MONOTONE_TOLERANCE || value > bound + MONOTONE_TOLERANCE {
                violations.push(Violation::OutOfRange { row: i, col: j, value });
            }
            if j + 1 < matrix.n_cols() {
                let next_value = matrix.get(i, j + 1);
                if value < next_value - MONOTONE_TOLERANCE {
                    violations.push(Violation::Inversion {
                        row: i,
                        col: j,
                        next_col: j + 1,
                        value,
                        next_value,
                    });
                }
            }
        }
    }
    ValidationReport { violations }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetNestingViolation {
    pub lambda: f64,
    pub next_lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossNestingViolation {
    pub lambda: f64,
    pub next_lambda: f64,
    pub loss: f64,
    pub next_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NestingReport {
    pub set_violations: Vec<SetNestingViolation>,
    pub loss_violations: Vec<LossNestingViolation>,
    /// Grid values at which the loss could not be evaluated, with the reason.
    pub loss_errors: Vec<(f64, String)>,
}

impl NestingReport {
    pub fn is_empty(&self) -> bool {
        self.set_violations.is_empty() && self.loss_violations.is_empty() && self.loss_errors.is_empty()
    }
}

/// Evaluates `family` at every grid value for one labeled input and reports
/// adjacent pairs where the set shrinks or the loss grows.
pub fn check_nesting<P, L>(family: &P, loss: &L, input: &P::Input, label: &L::Label, grid: &LambdaGrid) -> NestingReport
where
    P: SetPredictor,
    L: SetLoss<Set = P::Set>,
{
    let sets: Vec<P::Set> = grid.values().iter().map(|&l| family.predict(input, l)).collect();
    let sets: Vec<&P::Set> = sets.iter().collect();
    check_set_sequence(&sets, loss, label, grid)
}

/// Same as [`check_nesting`] for sets that were produced elsewhere, one per
/// grid value.
pub fn check_set_sequence<S, L>(sets: &[&S], loss: &L, label: &L::Label, grid: &LambdaGrid) -> NestingReport
where
    S: NestedSet,
    L: SetLoss<Set = S>,
{
    assert_eq!(sets.len(), grid.len(), "one set per grid value");
    let lambdas = grid.values();
    let mut report = NestingReport::default();

    for j in 0..sets.len().saturating_sub(1) {
        if !sets[j].is_subset_of(sets[j + 1]) {
            report.set_violations.push(SetNestingViolation {
                lambda: lambdas[j],
                next_lambda: lambdas[j + 1],
            });
        }
    }

    let mut losses = Vec::with_capacity(sets.len());
    for (set, &lambda) in sets.iter().zip(lambdas) {
        match loss.loss(label, set) {
            Ok(v) => losses.push(Some(v)),
            Err(e) => {
                report.loss_errors.push((lambda, e.to_string()));
                losses.push(None);
            }
        }
    }
    for j in 0..losses.len().saturating_sub(1) {
        if let (Some(a), Some(b)) = (losses[j], losses[j + 1]) {
            if a < b - MONOTONE_TOLERANCE {
                report.loss_violations.push(LossNestingViolation {
                    lambda: lambdas[j],
                    next_lambda: lambdas[j + 1],
                    loss: a,
                    next_loss: b,
                });
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{FalseNegativeRate, Miscoverage};
    use crate::predictors::{SegmentationSets, ThresholdLabelSets};
    use crate::types::{ClassProbs, GridMask, LabelSet, ProbGrid};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(rows: &[Vec<f64>], bound: f64) -> LossMatrix {
        let m = rows[0].len();
        let grid = LambdaGrid::new((0..m).map(|j| j as f64).collect()).unwrap();
        LossMatrix::from_rows(rows, grid, bound).unwrap()
    }

    #[test]
    fn monotone_row_is_clean() {
        assert!(validate_loss_matrix(&matrix(&[vec![1.0, 0.5, 0.0]], 1.0)).is_empty());
    }

    #[test]
    fn inversion_is_reported() {
        let report = validate_loss_matrix(&matrix(&[vec![0.2, 0.4]], 1.0));
        assert_eq!(
            report.violations,
            vec![Violation::Inversion {
                row: 0,
                col: 0,
                next_col: 1,
                value: 0.2,
                next_value: 0.4
            }]
        );
    }

    #[test]
    fn bound_violations_are_reported() {
        let report = validate_loss_matrix(&matrix(&[vec![0.5, 0.5, 0.5]], 0.4));
        assert_eq!(report.violations.len(), 3);
        assert!(report
            .violations
            .iter()
            .all(|v| matches!(v, Violation::OutOfRange { row: 0, .. })));
    }

    #[test]
    fn rounding_noise_is_absorbed() {
        assert!(validate_loss_matrix(&matrix(&[vec![0.3, 0.3 + 1e-13]], 1.0)).is_empty());
    }

    #[test]
    fn threshold_sets_are_nested() {
        let grid = LambdaGrid::new(vec![0.0, 0.5, 1.0]).unwrap();
        let probs = ClassProbs::new(vec![0.6, 0.4]).unwrap();
        let report = check_nesting(&ThresholdLabelSets, &Miscoverage, &probs, &0, &grid);
        assert!(report.is_empty());
    }

    #[test]
    fn adversarial_sets_are_flagged() {
        let grid = LambdaGrid::new(vec![0.0, 1.0]).unwrap();
        let first = LabelSet::new(vec![0], 2).unwrap();
        let second = LabelSet::empty(2);
        let report = check_set_sequence(&[&first, &second], &Miscoverage, &0, &grid);
        assert_eq!(
            report.set_violations,
            vec![SetNestingViolation {
                lambda: 0.0,
                next_lambda: 1.0
            }]
        );
        assert_eq!(report.loss_violations.len(), 1);
    }

    #[test]
    fn segmentation_sets_are_nested_exhaustively() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let grid = LambdaGrid::arithmetic(0.0, 1.0, 0.1).unwrap();
        for _ in 0..50 {
            let probs = ProbGrid::new(Array2::from_shape_fn((5, 5), |_| rng.random::<f64>())).unwrap();
            let mut truth = Array2::from_shape_fn((5, 5), |_| rng.random_bool(0.3));
            truth[(0, 0)] = true;
            let truth = GridMask::new(truth).unwrap();
            let report = check_nesting(&SegmentationSets, &FalseNegativeRate, &probs, &truth, &grid);
            assert!(report.is_empty(), "{report:?}");
        }
    }
}
