//! λ-indexed set predictor families. Every family here produces sets that
//! only grow as λ increases.
//!
//! Threshold comparisons are closed (`>=`, `<=`), so a value sitting exactly
//! on the boundary is included.

use ndarray::{Array2, Zip};

use crate::types::{Band, ClassProbs, GridMask, LabelSet, ProbGrid, QuantileTripleGrid};

/// Lower clamp on the band half-widths `Δ⁻` and `Δ⁺`.
pub const BAND_SCALE_FLOOR: f64 = 1e-6;

/// Prediction sets that can be compared by inclusion.
pub trait NestedSet {
    fn is_subset_of(&self, other: &Self) -> bool;

    /// Efficiency measure reported for this kind of set: label count,
    /// normalized mask size, or mean interval width.
    fn size(&self) -> f64;
}

/// A family `C_λ(x)` of prediction sets indexed by λ.
pub trait SetPredictor {
    type Input: ?Sized;
    type Set: NestedSet;

    fn predict(&self, input: &Self::Input, lambda: f64) -> Self::Set;
}

impl NestedSet for LabelSet {
    fn is_subset_of(&self, other: &Self) -> bool {
        self.members().iter().all(|&m| other.contains(m))
    }

    fn size(&self) -> f64 {
        self.len() as f64
    }
}

impl NestedSet for GridMask {
    fn is_subset_of(&self, other: &Self) -> bool {
        self.dim() == other.dim() && Zip::from(self.cells()).and(other.cells()).all(|&a, &b| !a || b)
    }

    fn size(&self) -> f64 {
        self.normalized_size()
    }
}

impl NestedSet for Band {
    fn is_subset_of(&self, other: &Self) -> bool {
        self.dim() == other.dim()
            && Zip::from(self.lower())
                .and(self.upper())
                .and(other.lower())
                .and(other.upper())
                .all(|&l, &u, &ol, &ou| ol <= l && u <= ou)
    }

    fn size(&self) -> f64 {
        self.mean_width()
    }
}

/// `{k : f_k(x) >= 1 - λ}`.
pub fn threshold_label_set(probs: &ClassProbs, lambda: f64) -> LabelSet {
    let cut = 1.0 - lambda;
    let members = probs
        .as_slice()
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= cut)
        .map(|(k, _)| k)
        .collect();
    LabelSet::from_sorted(members, probs.num_classes())
}

/// `{y : A(x, y) <= λ}` for per-label nonconformity scores.
pub fn nonconformity_label_set(scores: &[f64], lambda: f64) -> LabelSet {
    let members = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s <= lambda)
        .map(|(k, _)| k)
        .collect();
    LabelSet::from_sorted(members, scores.len())
}

/// `{(p, q) : f_(p,q)(x) >= 1 - λ}`.
pub fn grid_segmentation_set(grid: &ProbGrid, lambda: f64) -> GridMask {
    let cut = 1.0 - lambda;
    GridMask::new(grid.values().mapv(|p| p >= cut)).expect("probability grid is non-empty")
}

/// Half-widths `Δ⁻ = max(q50 - q05, 1e-6)` and `Δ⁺ = max(q95 - q50, 1e-6)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandScale {
    delta_minus: Array2<f64>,
    delta_plus: Array2<f64>,
}

impl BandScale {
    pub fn from_triple(triple: &QuantileTripleGrid) -> Self {
        let delta_minus = Zip::from(triple.q50())
            .and(triple.q05())
            .map_collect(|m, lo| (m - lo).max(BAND_SCALE_FLOOR));
        let delta_plus = Zip::from(triple.q95())
            .and(triple.q50())
            .map_collect(|hi, m| (hi - m).max(BAND_SCALE_FLOOR));
        Self {
            delta_minus,
            delta_plus,
        }
    }

    pub fn delta_minus(&self) -> &Array2<f64> {
        &self.delta_minus
    }

    pub fn delta_plus(&self) -> &Array2<f64> {
        &self.delta_plus
    }

    /// `(1/PQ) Σ λ (Δ⁺ + Δ⁻)`, the mean width of the band at λ.
    pub fn average_interval_length(&self, lambda: f64) -> f64 {
        let total = Zip::from(&self.delta_minus)
            .and(&self.delta_plus)
            .fold(0.0, |acc, m, p| acc + m + p);
        lambda * total / self.delta_minus.len() as f64
    }
}

/// `[q50 - λΔ⁻, q50 + λΔ⁺]` per cell.
///
/// `lambda` must be non-negative; it is not bounded above.
pub fn band_from_quantiles(triple: &QuantileTripleGrid, scale: &BandScale, lambda: f64) -> Band {
    debug_assert!(lambda >= 0.0);
    let lower = Zip::from(triple.q50())
        .and(scale.delta_minus())
        .map_collect(|m, d| m - lambda * d);
    let upper = Zip::from(triple.q50())
        .and(scale.delta_plus())
        .map_collect(|m, d| m + lambda * d);
    Band::new(lower, upper).expect("non-negative lambda keeps the band ordered")
}

/// Quantile forecast bundled with its band scale.
#[derive(Debug, Clone, PartialEq)]
pub struct BandForecast {
    pub triple: QuantileTripleGrid,
    pub scale: BandScale,
}

impl BandForecast {
    pub fn new(triple: QuantileTripleGrid) -> Self {
        let scale = BandScale::from_triple(&triple);
        Self { triple, scale }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ThresholdLabelSets;

impl SetPredictor for ThresholdLabelSets {
    type Input = ClassProbs;
    type Set = LabelSet;

    fn predict(&self, input: &ClassProbs, lambda: f64) -> LabelSet {
        threshold_label_set(input, lambda)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NonconformityLabelSets;

impl SetPredictor for NonconformityLabelSets {
    type Input = [f64];
    type Set = LabelSet;

    fn predict(&self, input: &[f64], lambda: f64) -> LabelSet {
        nonconformity_label_set(input, lambda)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SegmentationSets;

impl SetPredictor for SegmentationSets {
    type Input = ProbGrid;
    type Set = GridMask;

    fn predict(&self, input: &ProbGrid, lambda: f64) -> GridMask {
        grid_segmentation_set(input, lambda)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct QuantileBands;

impl SetPredictor for QuantileBands {
    type Input = BandForecast;
    type Set = Band;

    fn predict(&self, input: &BandForecast, lambda: f64) -> Band {
        band_from_quantiles(&input.triple, &input.scale, lambda)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn probs(v: &[f64]) -> ClassProbs {
        ClassProbs::new(v.to_vec()).unwrap()
    }

    #[test]
    fn threshold_examples() {
        let p = probs(&[0.7, 0.2, 0.1]);
        assert_eq!(threshold_label_set(&p, 1.0), LabelSet::full(3));
        assert!(threshold_label_set(&p, 0.0).is_empty());
        assert_eq!(threshold_label_set(&p, 0.35).members(), &[0]);
    }

    #[test]
    fn nonconformity_examples() {
        let scores = [0.3, 0.6];
        assert!(nonconformity_label_set(&scores, 0.29).is_empty());
        assert_eq!(nonconformity_label_set(&scores, 0.6), LabelSet::full(2));
        assert_eq!(nonconformity_label_set(&scores, 0.3).members(), &[0]);
    }

    #[test]
    fn segmentation_examples() {
        let g = ProbGrid::new(array![[0.9, 0.1], [0.5, 0.6]]).unwrap();
        assert_eq!(grid_segmentation_set(&g, 1.0).count(), 4);
        assert_eq!(grid_segmentation_set(&g, 0.0).count(), 0);
        assert_eq!(
            grid_segmentation_set(&g, 0.5).cells(),
            &array![[true, false], [true, true]]
        );
    }

    #[test]
    fn band_examples() {
        let triple = QuantileTripleGrid::new(array![[8.0]], array![[10.0]], array![[13.0]]).unwrap();
        let scale = BandScale::from_triple(&triple);
        let b = band_from_quantiles(&triple, &scale, 0.5);
        assert_eq!((b.lower()[(0, 0)], b.upper()[(0, 0)]), (9.0, 11.5));

        let b0 = band_from_quantiles(&triple, &scale, 0.0);
        assert_eq!(b0.lower(), triple.q50());
        assert_eq!(b0.upper(), triple.q50());

        let flat = QuantileTripleGrid::new(array![[4.0]], array![[4.0]], array![[4.0]]).unwrap();
        let flat_scale = BandScale::from_triple(&flat);
        let wide = band_from_quantiles(&flat, &flat_scale, 1e6);
        assert!((wide.lower()[(0, 0)] - 3.0).abs() < 1e-9);
        assert!((wide.upper()[(0, 0)] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn average_interval_length_matches_band_width() {
        let triple = QuantileTripleGrid::new(array![[8.0, 0.0]], array![[10.0, 1.0]], array![[13.0, 1.5]]).unwrap();
        let scale = BandScale::from_triple(&triple);
        let band = band_from_quantiles(&triple, &scale, 2.0);
        assert!((scale.average_interval_length(2.0) - band.mean_width()).abs() < 1e-12);
        assert!((band.mean_width() - (2.0 * 5.0 + 2.0 * 1.5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn threshold_at_conformal_quantile_is_icp_set() {
        // {k : f_k >= 1 - Q} == {k : 1 - f_k <= Q}
        let p = probs(&[0.5, 0.25, 0.25]);
        let scores: Vec<f64> = p.as_slice().iter().map(|f| 1.0 - f).collect();
        for q in [0.0, 0.5, 0.75, 1.0] {
            assert_eq!(threshold_label_set(&p, q), nonconformity_label_set(&scores, q));
        }
    }

    fn lambda_steps() -> Vec<f64> {
        (0..=10).map(|j| j as f64 / 10.0).collect()
    }

    proptest! {
        #[test]
        fn label_families_are_nested(raw in prop::collection::vec(0.001f64..1.0, 2..=10)) {
            let total: f64 = raw.iter().sum();
            let p = ClassProbs::new(raw.iter().map(|r| r / total).collect()).unwrap();
            let scores: Vec<f64> = p.as_slice().iter().map(|f| 1.0 - f).collect();
            let lambdas = lambda_steps();
            for w in lambdas.windows(2) {
                prop_assert!(threshold_label_set(&p, w[0]).is_subset_of(&threshold_label_set(&p, w[1])));
                prop_assert!(nonconformity_label_set(&scores, w[0]).is_subset_of(&nonconformity_label_set(&scores, w[1])));
            }
        }

        #[test]
        fn grid_families_are_nested(
            rows in 1usize..=8,
            cols in 1usize..=8,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = ProbGrid::new(Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>())).unwrap();
            let q05 = Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>());
            let q50 = Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>());
            let q95 = Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>());
            let forecast = BandForecast::new(QuantileTripleGrid::new(q05, q50, q95).unwrap());
            let lambdas = lambda_steps();
            for w in lambdas.windows(2) {
                prop_assert!(grid_segmentation_set(&g, w[0]).is_subset_of(&grid_segmentation_set(&g, w[1])));
                let a = QuantileBands.predict(&forecast, w[0] * 10.0);
                let b = QuantileBands.predict(&forecast, w[1] * 10.0);
                prop_assert!(a.is_subset_of(&b));
            }
        }

        #[test]
        fn band_coverage_is_monotone(
            center in -5.0f64..5.0,
            lo in 0.0f64..2.0,
            hi in 0.0f64..2.0,
            y in -10.0f64..10.0,
            l1 in 0.0f64..20.0,
            extra in 0.0f64..20.0,
        ) {
            let triple = QuantileTripleGrid::new(
                array![[center - lo]], array![[center]], array![[center + hi]]).unwrap();
            let f = BandForecast::new(triple);
            if QuantileBands.predict(&f, l1).covers((0, 0), y) {
                prop_assert!(QuantileBands.predict(&f, l1 + extra).covers((0, 0), y));
            }
        }

        #[test]
        fn triple_sorting_is_idempotent(a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0) {
            let t = QuantileTripleGrid::new(array![[a]], array![[b]], array![[c]]).unwrap();
            prop_assert!(t.q05()[(0, 0)] <= t.q50()[(0, 0)] && t.q50()[(0, 0)] <= t.q95()[(0, 0)]);
            let again = QuantileTripleGrid::new(t.q05().clone(), t.q50().clone(), t.q95().clone()).unwrap();
            prop_assert_eq!(again, t);
        }
    }
}
