//! Split conformal prediction as the miscoverage, `alpha = 0` special case.

use serde::{Deserialize, Serialize};

use super::data::gen_classification;
use crate::calibrate::{clcp_search, icp_quantile};
use crate::error::{Error, Result};
use crate::losses::{compute_loss_matrix, Miscoverage};
use crate::models::{train_softmax, TrainOptions};
use crate::predictors::NonconformityLabelSets;
use crate::types::{ControlConfig, LambdaGrid};

/// `|λ*_CLCP − λ̂_ICP|` for one set of calibration nonconformity scores.
///
/// Each score is the true label's score, so the loss at λ is `1{s_i > λ}`.
/// The grid must strictly cover the scores.
pub fn cp_equivalence_check(scores: &[f64], delta: f64, grid: &LambdaGrid) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("calibration scores"));
    }
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
    if !(grid.min() < lo && grid.max() > hi) {
        return Err(Error::GridDoesNotCover {
            grid_min: grid.min(),
            grid_max: grid.max(),
            score_min: lo,
            score_max: hi,
        });
    }
    let config = ControlConfig::new(0.0, delta)?;
    config.check_sample_size(scores.len())?;

    let inputs: Vec<[f64; 1]> = scores.iter().map(|&s| [s]).collect();
    let label = 0usize;
    let samples: Vec<(&[f64], &usize)> = inputs.iter().map(|s| (&s[..], &label)).collect();
    let matrix = compute_loss_matrix(&samples, &NonconformityLabelSets, &Miscoverage, grid)?;
    let clcp = clcp_search(&matrix, &config)?.lambda_star;
    let icp = icp_quantile(scores, delta)?;
    Ok((clcp - icp).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpSweep {
    pub step: f64,
    pub differences: Vec<f64>,
    pub max_difference: f64,
}

/// Runs [`cp_equivalence_check`] on `seeds` independent classification
/// datasets. Scores are `1 - f_y(x)` from a softmax model trained on a
/// separate split of each dataset; the grid spans `[-Δ, 1 + Δ]` with step Δ.
pub fn cp_equivalence_sweep(seeds: u64, n: usize, delta: f64, step: f64) -> Result<CpSweep> {
    let grid = LambdaGrid::arithmetic(-step, 1.0 + step, step)?;
    let n_train = 200;
    let options = TrainOptions::new(0.5, 100);
    let mut differences = Vec::with_capacity(seeds as usize);
    for seed in 0..seeds {
        let data = gen_classification(seed, n_train + n, 3, 4, 1.0)?;
        let (model, _) = train_softmax(&data.features[..n_train], &data.labels[..n_train], 3, &options)?;
        let scores = data.features[n_train..]
            .iter()
            .zip(&data.labels[n_train..])
            .map(|(x, &y)| model.predict(x).map(|p| 1.0 - p.as_slice()[y]))
            .collect::<Result<Vec<_>>>()?;
        differences.push(cp_equivalence_check(&scores, delta, &grid)?);
    }
    let max_difference = differences.iter().copied().fold(0.0, f64::max);
    Ok(CpSweep {
        step,
        differences,
        max_difference,
    })
}
