//! Conformal quantiles and the λ searches built on them.
//!
//! The conformal quantile of `n` values at level `1 - δ` is the k-th smallest
//! element of the values plus one sentinel (the loss bound `B`, or `+∞` for
//! nonconformity scores), with `k = ⌈(1 - δ)(n + 1)⌉`.
//!
//! [`clcp_search`] returns the smallest grid λ whose conformal loss quantile
//! is at most `alpha`. Under exchangeability the test loss at that λ then
//! exceeds `alpha` with probability at most `delta`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{check_delta, CalibrationResult, ControlConfig, LambdaGrid, LossMatrix};

/// Slack when rounding `(1 - δ)(n + 1)` up, so that products which are
/// integers in exact arithmetic are not pushed to the next integer by
/// floating-point noise.
const RANK_SLACK: f64 = 1e-9;

/// What the conformal quantile appends to the sample values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Augmentation {
    /// The loss bound `B`.
    BoundB(f64),
    /// `+∞`, for nonconformity scores.
    Infinity,
}

impl Augmentation {
    pub fn value(self) -> f64 {
        match self {
            Augmentation::BoundB(b) => b,
            Augmentation::Infinity => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConformalQuantileSpec {
    pub delta: f64,
    pub augmentation: Augmentation,
}

impl ConformalQuantileSpec {
    pub fn new(delta: f64, augmentation: Augmentation) -> Result<Self> {
        check_delta(delta)?;
        Ok(Self { delta, augmentation })
    }

    pub fn evaluate(&self, values: &[f64]) -> Result<f64> {
        conformal_quantile(values, self.augmentation.value(), self.delta)
    }
}

/// `⌈(1 - δ) · size⌉`, clamped to `1..=size`.
pub fn quantile_rank(size: usize, delta: f64) -> usize {
    let raw = ((1.0 - delta) * size as f64 - RANK_SLACK).ceil();
    (raw.max(1.0) as usize).min(size)
}

fn kth_smallest(mut values: Vec<f64>, k: usize) -> f64 {
    let (_, kth, _) = values.select_nth_unstable_by(k - 1, f64::total_cmp);
    *kth
}

fn check_values(values: &[f64]) -> Result<()> {
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("quantile input contains NaN"));
    }
    Ok(())
}

/// k-th smallest of `values ∪ {augment}` with `k = ⌈(1 - δ)(n + 1)⌉`.
pub fn conformal_quantile(values: &[f64], augment: f64, delta: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("conformal quantile values"));
    }
    check_delta(delta)?;
    check_values(values)?;
    if augment.is_nan() {
        return Err(Error::invalid("quantile augmentation is NaN"));
    }
    let k = quantile_rank(values.len() + 1, delta);
    let mut all = Vec::with_capacity(values.len() + 1);
    all.extend_from_slice(values);
    all.push(augment);
    Ok(kth_smallest(all, k))
}

/// Split-conformal score quantile: the sentinel is `+∞`, which is returned
/// when `k = n + 1`.
pub fn icp_quantile(scores: &[f64], delta: f64) -> Result<f64> {
    conformal_quantile(scores, f64::INFINITY, delta)
}

/// `⌈(1 - δ) · len⌉`-th smallest of `values` with no sentinel. Stands in for
/// the quantile over calibration and test losses together.
pub fn augmented_quantile_oracle(values: &[f64], delta: f64) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::EmptyInput("augmented quantile needs at least two values"));
    }
    check_delta(delta)?;
    check_values(values)?;
    Ok(kth_smallest(values.to_vec(), quantile_rank(values.len(), delta)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    pub feasible: bool,
    /// `min_λ max_i L_i(λ)`.
    pub min_max_loss: f64,
    /// `λ_max` when feasible.
    pub witness: Option<f64>,
}

/// Checks `min_λ max_i L_i(λ) <= alpha`, the condition under which the
/// guarantee is meaningful.
///
/// Rows of a valid matrix are non-increasing, so the minimum over λ of the
/// column maxima sits in the last column.
pub fn check_feasibility(matrix: &LossMatrix, alpha: f64) -> Feasibility {
    let min_max_loss = matrix
        .column(matrix.n_cols() - 1)
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let feasible = min_max_loss <= alpha;
    Feasibility {
        feasible,
        min_max_loss,
        witness: feasible.then(|| matrix.grid().max()),
    }
}

/// Smallest grid λ with `conformal_quantile(L(λ), B, δ) <= alpha`.
///
/// Scans the grid upward and stops at the first success; column quantiles are
/// non-increasing in λ for a valid matrix. The k-th smallest of a multiset is
/// at most `alpha` exactly when at least k elements are, so each column costs
/// one counting pass.
pub fn clcp_search(matrix: &LossMatrix, config: &ControlConfig) -> Result<CalibrationResult> {
    let n = matrix.n_rows();
    config.check_sample_size(n)?;
    let alpha = config.alpha;
    let bound = matrix.bound();
    let k = quantile_rank(n + 1, config.delta);
    let sentinel_hits = usize::from(bound <= alpha);

    for j in 0..matrix.n_cols() {
        let column = matrix.column(j);
        let hits = column.iter().filter(|&&v| v <= alpha).count() + sentinel_hits;
        if hits >= k {
            return Ok(CalibrationResult {
                lambda_star: matrix.grid().values()[j],
                quantile_at_lambda_star: conformal_quantile(column, bound, config.delta)?,
                feasible: check_feasibility(matrix, alpha).feasible,
                scanned: j + 1,
            });
        }
    }

    let mut best = f64::INFINITY;
    for j in 0..matrix.n_cols() {
        best = best.min(conformal_quantile(matrix.column(j), bound, config.delta)?);
    }
    Err(Error::Infeasible { best })
}

/// Conformal risk control on the same grid: smallest λ with
/// `(n/(n+1))·mean(L(λ)) + B/(n+1) <= alpha`. `quantile_at_lambda_star` holds
/// that inflated risk.
pub fn crc_search(matrix: &LossMatrix, alpha: f64) -> Result<CalibrationResult> {
    let n = matrix.n_rows() as f64;
    let bound = matrix.bound();
    let inflated = |j: usize| {
        let mean = matrix.column(j).iter().sum::<f64>() / n;
        n / (n + 1.0) * mean + bound / (n + 1.0)
    };
    let mut best = f64::INFINITY;
    for j in 0..matrix.n_cols() {
        let risk = inflated(j);
        if risk <= alpha {
            return Ok(CalibrationResult {
                lambda_star: matrix.grid().values()[j],
                quantile_at_lambda_star: risk,
                feasible: check_feasibility(matrix, alpha).feasible,
                scanned: j + 1,
            });
        }
        best = best.min(risk);
    }
    Err(Error::Infeasible { best })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStepResult {
    pub result: CalibrationResult,
    /// The smallest ladder value already satisfied the condition, so no
    /// bracket exists and it was returned as is.
    pub degenerate: bool,
    /// `(λ_2, λ_1)`: adjacent ladder values with `Q(λ_2) > alpha >= Q(λ_1)`.
    pub bracket: Option<(f64, f64)>,
    /// The fine grid scanned inside the bracket.
    pub fine_grid: Option<LambdaGrid>,
}

/// Coarse-to-fine λ search for families with unbounded λ.
///
/// `coarse_ladder` is strictly descending (e.g. `100, 10, 1, 0.1, ...`).
/// Walking down it finds adjacent `λ_1 > λ_2` with `Q(λ_1) <= alpha < Q(λ_2)`;
/// then [`clcp_search`] runs on `refine_points` equally spaced values from
/// `λ_2` to `λ_1`. `evaluate` returns the calibration losses at a given λ.
pub fn two_step_search<F>(
    mut evaluate: F,
    bound: f64,
    config: &ControlConfig,
    coarse_ladder: &[f64],
    refine_points: usize,
) -> Result<TwoStepResult>
where
    F: FnMut(f64) -> Result<Vec<f64>>,
{
    if coarse_ladder.is_empty() {
        return Err(Error::EmptyInput("coarse ladder"));
    }
    if coarse_ladder.windows(2).any(|w| w[1] >= w[0]) || coarse_ladder.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("coarse ladder must be finite and strictly descending"));
    }
    if refine_points < 2 {
        return Err(Error::invalid("refine_points must be at least 2"));
    }

    let mut quantile_at = |lambda: f64| -> Result<f64> {
        let losses = evaluate(lambda)?;
        config.check_sample_size(losses.len())?;
        conformal_quantile(&losses, bound, config.delta)
    };

    let top = quantile_at(coarse_ladder[0])?;
    if top > config.alpha {
        return Err(Error::Infeasible { best: top });
    }
    let mut previous = (coarse_ladder[0], top);
    let mut bracket = None;
    for &lambda in &coarse_ladder[1..] {
        let q = quantile_at(lambda)?;
        if q > config.alpha {
            bracket = Some((lambda, previous.0));
            break;
        }
        previous = (lambda, q);
    }

    let Some((low, high)) = bracket else {
        let (lambda, quantile) = previous;
        let losses = evaluate(lambda)?;
        let feasible = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max) <= config.alpha;
        return Ok(TwoStepResult {
            result: CalibrationResult {
                lambda_star: lambda,
                quantile_at_lambda_star: quantile,
                feasible,
                scanned: coarse_ladder.len(),
            },
            degenerate: true,
            bracket: None,
            fine_grid: None,
        });
    };

    let step = (high - low) / (refine_points - 1) as f64;
    let mut values: Vec<f64> = (0..refine_points).map(|t| low + t as f64 * step).collect();
    values[refine_points - 1] = high;
    let grid = LambdaGrid::with_step(values, step)?;

    let mut columns = Vec::new();
    let mut n = None;
    for &lambda in grid.values() {
        let losses = evaluate(lambda)?;
        match n {
            None => n = Some(losses.len()),
            Some(len) if len != losses.len() => {
                return Err(Error::DimensionMismatch(format!(
                    "loss evaluator returned {} values, expected {len}",
                    losses.len()
                )))
            }
            _ => {}
        }
        columns.extend(losses);
    }
    let matrix = LossMatrix::from_column_major(columns, n.unwrap_or(0), grid.clone(), bound)?;
    let result = clcp_search(&matrix, config)?;
    Ok(TwoStepResult {
        result,
        degenerate: false,
        bracket: Some((low, high)),
        fine_grid: Some(grid),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Sort-and-index reference, independent of the selection code above.
    fn sorted_kth(values: &[f64], extra: Option<f64>, k: usize) -> f64 {
        let mut all: Vec<f64> = values.to_vec();
        all.extend(extra);
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        all[k - 1]
    }

    fn worked_matrix() -> LossMatrix {
        let grid = LambdaGrid::new(vec![0.0, 0.5, 1.0]).unwrap();
        LossMatrix::from_rows(
            &[vec![1.0, 0.2, 0.0], vec![1.0, 0.5, 0.0], vec![0.8, 0.1, 0.0]],
            grid,
            1.0,
        )
        .unwrap()
    }

    /// Every column's quantile computed by sorting; first satisfying λ.
    fn exhaustive_clcp(m: &LossMatrix, cfg: &ControlConfig) -> Option<(f64, f64)> {
        let k = quantile_rank(m.n_rows() + 1, cfg.delta);
        (0..m.n_cols())
            .map(|j| (m.grid().values()[j], sorted_kth(m.column(j), Some(m.bound()), k)))
            .find(|&(_, q)| q <= cfg.alpha)
    }

    #[test]
    fn rank_handles_float_noise() {
        assert_eq!(quantile_rank(5, 0.25), 4);
        assert_eq!(quantile_rank(20, 0.05), 19);
        assert_eq!(quantile_rank(10, 0.1), 9);
        assert_eq!(quantile_rank(201, 0.15), 171);
        assert_eq!(quantile_rank(2, 0.99), 1);
    }

    #[test]
    fn conformal_quantile_examples() {
        let v = [0.1, 0.3, 0.2, 0.5];
        assert_eq!(sorted_kth(&v, Some(1.0), 4), 0.5);
        assert_eq!(conformal_quantile(&v, 1.0, 0.25).unwrap(), 0.5);
        assert_eq!(conformal_quantile(&[0.0; 4], 1.0, 0.5).unwrap(), 0.0);
        assert_eq!(conformal_quantile(&[0.4], 1.0, 0.9).unwrap(), 0.4);
        assert!(matches!(conformal_quantile(&[], 1.0, 0.5), Err(Error::EmptyInput(_))));
        assert!(conformal_quantile(&[0.1], 1.0, 1.0).is_err());
    }

    #[test]
    fn icp_quantile_examples() {
        let s = [0.2, 0.9, 0.5];
        assert_eq!(icp_quantile(&s, 0.5).unwrap(), sorted_kth(&s, Some(f64::INFINITY), 2));
        assert_eq!(icp_quantile(&s, 0.5).unwrap(), 0.5);
        assert_eq!(icp_quantile(&[0.2], 0.3).unwrap(), f64::INFINITY);
        assert_eq!(icp_quantile(&s, 0.99).unwrap(), 0.2);
    }

    #[test]
    fn augmented_oracle_examples() {
        assert_eq!(
            augmented_quantile_oracle(&[0.1, 0.2, 0.3, 0.5, 1.0], 0.25).unwrap(),
            0.5
        );
        assert_eq!(augmented_quantile_oracle(&[0.7; 6], 0.3).unwrap(), 0.7);
        assert_eq!(augmented_quantile_oracle(&[0.0, 1.0], 0.6).unwrap(), 0.0);
        assert!(augmented_quantile_oracle(&[0.0], 0.6).is_err());
    }

    #[test]
    fn feasibility_examples() {
        let g = LambdaGrid::new(vec![0.0, 1.0]).unwrap();
        let m = LossMatrix::from_rows(&[vec![1.0, 0.0], vec![0.8, 0.0]], g.clone(), 1.0).unwrap();
        let f = check_feasibility(&m, 0.1);
        assert!(f.feasible);
        assert_eq!(f.witness, Some(1.0));

        let m = LossMatrix::from_rows(&[vec![1.0, 0.5]], g.clone(), 1.0).unwrap();
        assert!(!check_feasibility(&m, 0.3).feasible);

        let m = LossMatrix::from_rows(&[vec![0.9, 0.2], vec![0.7, 0.2]], g, 1.0).unwrap();
        assert!(check_feasibility(&m, 0.2).feasible);
    }

    #[test]
    fn clcp_worked_examples() {
        let m = worked_matrix();
        let cfg = ControlConfig::new(0.3, 0.5).unwrap();
        assert_eq!(exhaustive_clcp(&m, &cfg), Some((0.5, 0.2)));
        let r = clcp_search(&m, &cfg).unwrap();
        assert_eq!(r.lambda_star, 0.5);
        assert_eq!(r.quantile_at_lambda_star, 0.2);
        assert_eq!(r.scanned, 2);
        assert!(r.feasible);

        let cfg = ControlConfig::new(0.05, 0.5).unwrap();
        assert_eq!(exhaustive_clcp(&m, &cfg), Some((1.0, 0.0)));
        assert_eq!(clcp_search(&m, &cfg).unwrap().lambda_star, 1.0);
    }

    #[test]
    fn clcp_alpha_at_bound_takes_smallest_lambda() {
        let m = worked_matrix();
        let r = clcp_search(&m, &ControlConfig::new(1.0, 0.3).unwrap()).unwrap();
        assert_eq!(r.lambda_star, 0.0);
    }

    #[test]
    fn clcp_errors() {
        let m = worked_matrix();
        let err = clcp_search(&m, &ControlConfig::new(0.3, 0.25).unwrap()).unwrap_err();
        assert_eq!(err.code(), "DELTA_TOO_SMALL");

        let g = LambdaGrid::new(vec![0.0, 1.0]).unwrap();
        let m = LossMatrix::from_rows(&[vec![1.0, 0.6], vec![1.0, 0.6]], g, 1.0).unwrap();
        match clcp_search(&m, &ControlConfig::new(0.3, 0.5).unwrap()) {
            Err(Error::Infeasible { best }) => assert_eq!(best, 0.6),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn crc_examples() {
        let m = worked_matrix();
        // columns: λ=0 → (3/4)(2.8/3)+1/4 = 0.95; λ=0.5 → (3/4)(0.8/3)+1/4 = 0.45
        let r = crc_search(&m, 0.5).unwrap();
        assert_eq!(r.lambda_star, 0.5);
        assert!((r.quantile_at_lambda_star - 0.45).abs() < 1e-12);

        let g = LambdaGrid::unit_interval();
        let zeros = LossMatrix::from_rows(&vec![vec![0.0; 101]; 4], g.clone(), 1.0).unwrap();
        assert_eq!(crc_search(&zeros, 0.2 + 1e-9).unwrap().lambda_star, 0.0);

        let g = LambdaGrid::new(vec![0.0, 1.0]).unwrap();
        let ones = LossMatrix::from_rows(&[vec![1.0, 1.0]], g, 1.0).unwrap();
        assert_eq!(crc_search(&ones, 0.4).unwrap_err().code(), "INFEASIBLE");
    }

    const LADDER: [f64; 6] = [100.0, 10.0, 1.0, 0.1, 0.01, 0.001];

    #[test]
    fn two_step_degenerate_and_infeasible() {
        let cfg = ControlConfig::new(0.1, 0.2).unwrap();
        let r = two_step_search(|_| Ok(vec![0.0; 10]), 1.0, &cfg, &LADDER, 100).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.result.lambda_star, 0.001);

        let err = two_step_search(|_| Ok(vec![1.0; 10]), 1.0, &cfg, &LADDER, 100).unwrap_err();
        assert_eq!(err.code(), "INFEASIBLE");
    }

    #[test]
    fn two_step_lands_within_one_fine_step_of_crossing() {
        // one calibration sample whose loss falls linearly from 1 at λ=0 to 0 at λ=0.8
        let loss = |l: f64| (1.0 - l / 0.8).clamp(0.0, 1.0);
        let cfg = ControlConfig::new(0.3, 0.6).unwrap();
        let r = two_step_search(|l| Ok(vec![loss(l)]), 1.0, &cfg, &LADDER, 100).unwrap();
        assert_eq!(r.bracket, Some((0.1, 1.0)));

        // bisection on the (monotone) quantile Q(λ) = min(L(λ), B) to find the crossing
        let q = |l: f64| sorted_kth(&[loss(l)], Some(1.0), quantile_rank(2, 0.6));
        let (mut lo, mut hi) = (0.1, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if q(mid) <= 0.3 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let step = 0.9 / 99.0;
        let lambda = r.result.lambda_star;
        assert!(
            lambda >= hi - 1e-12 && lambda <= hi + step + 1e-12,
            "{lambda} vs crossing {hi}"
        );
    }

    #[test]
    fn two_step_equals_clcp_on_fine_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cuts: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..3.0f64)).collect();
        let eval = |l: f64| Ok(cuts.iter().map(|c| if l >= *c { 0.0 } else { 0.5 }).collect());
        let cfg = ControlConfig::new(0.2, 0.1).unwrap();
        let r = two_step_search(eval, 1.0, &cfg, &LADDER, 50).unwrap();
        let grid = r.fine_grid.clone().unwrap();
        let rows: Vec<Vec<f64>> = cuts
            .iter()
            .map(|c| grid.values().iter().map(|l| if *l >= *c { 0.0 } else { 0.5 }).collect())
            .collect();
        let m = LossMatrix::from_rows(&rows, grid, 1.0).unwrap();
        assert_eq!(clcp_search(&m, &cfg).unwrap(), r.result);
    }

    fn random_monotone(rng: &mut ChaCha8Rng, n: usize, m: usize) -> LossMatrix {
        let grid = LambdaGrid::arithmetic(0.0, 1.0, 1.0 / (m - 1) as f64).unwrap();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut row: Vec<f64> = (0..m)
                    .map(|_| {
                        if rng.random_bool(0.2) {
                            0.0
                        } else {
                            (rng.random_range(0..=10) as f64) / 10.0
                        }
                    })
                    .collect();
                row.sort_by(|a, b| b.partial_cmp(a).unwrap());
                row
            })
            .collect();
        LossMatrix::from_rows(&rows, grid, 1.0).unwrap()
    }

    proptest! {
        #[test]
        fn clcp_matches_exhaustive_scan(seed in any::<u64>(), n in 2usize..60, m in 2usize..30,
                                        alpha in 0.0f64..1.2, delta in 0.02f64..0.98) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mat = random_monotone(&mut rng, n, m);
            let cfg = ControlConfig::new(alpha, delta).unwrap();
            match (clcp_search(&mat, &cfg), exhaustive_clcp(&mat, &cfg)) {
                (Ok(r), Some((l, q))) => {
                    prop_assert_eq!(r.lambda_star, l);
                    prop_assert_eq!(r.quantile_at_lambda_star, q);
                }
                (Err(Error::Infeasible { .. }), None) => {}
                (Err(Error::DeltaTooSmall { .. }), _) => prop_assert!(delta <= 1.0 / (n as f64 + 1.0)),
                (a, b) => prop_assert!(false, "mismatch {:?} vs {:?}", a, b),
            }
        }

        #[test]
        fn column_quantiles_non_increasing(seed in any::<u64>(), n in 1usize..40, delta in 0.05f64..0.95) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mat = random_monotone(&mut rng, n, 12);
            let qs: Vec<f64> = (0..12).map(|j| conformal_quantile(mat.column(j), 1.0, delta).unwrap()).collect();
            prop_assert!(qs.windows(2).all(|w| w[1] <= w[0]));
        }

        #[test]
        fn lambda_star_monotone_in_alpha_and_delta(seed in any::<u64>(), a1 in 0.0f64..1.0, a2 in 0.0f64..1.0,
                                                   d1 in 0.05f64..0.95, d2 in 0.05f64..0.95) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mat = random_monotone(&mut rng, 30, 15);
            let (alo, ahi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let (dlo, dhi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let run = |a: f64, d: f64| clcp_search(&mat, &ControlConfig::new(a, d).unwrap()).ok().map(|r| r.lambda_star);
            if let (Some(x), Some(y)) = (run(alo, dlo), run(ahi, dlo)) {
                prop_assert!(x >= y);
            }
            if let (Some(x), Some(y)) = (run(alo, dlo), run(alo, dhi)) {
                prop_assert!(x >= y);
            }
        }
    }
}
