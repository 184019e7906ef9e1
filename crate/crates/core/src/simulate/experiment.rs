//! Monte Carlo verification of the loss-control guarantee.
//!
//! A [`Scenario`] is a fixed pool of labeled samples with a trained model.
//! Each trial draws `n + 1` distinct pool samples uniformly at random, so the
//! calibration set and the test point are exchangeable; calibrates on the
//! first `n`; and records whether the test loss exceeds `alpha`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibrate::{clcp_search, crc_search, two_step_search};
use crate::error::{Error, Result};
use crate::losses::{compute_loss_matrix, BandMissProfile, SetLoss};
use crate::predictors::{BandForecast, NestedSet, QuantileBands, SetPredictor};
use crate::types::{ControlConfig, LambdaGrid, LossMatrix};

use ndarray::Array2;

/// How λ is chosen from the calibration losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Smallest λ whose conformal loss quantile is at most alpha.
    #[default]
    Clcp,
    /// Conformal risk control, the expected-loss baseline.
    Crc,
}

/// A calibration problem over a fixed sample pool.
pub trait Scenario {
    fn pool_size(&self) -> usize;

    /// λ* from the pool samples at `calibration`.
    fn calibrate(&self, calibration: &[usize], method: Method, config: &ControlConfig) -> Result<f64>;

    /// Loss and efficiency of pool sample `index` at `lambda`.
    fn evaluate(&self, index: usize, lambda: f64) -> Result<(f64, f64)>;
}

/// Scenario over a fixed λ grid. The whole pool's loss matrix is computed
/// once; each trial selects its calibration rows.
pub struct GridScenario<P, L>
where
    P: SetPredictor,
    P::Input: Sized,
    L: SetLoss,
    L::Label: Sized,
{
    inputs: Vec<P::Input>,
    labels: Vec<L::Label>,
    family: P,
    loss: L,
    pool_losses: LossMatrix,
}

impl<P, L> GridScenario<P, L>
where
    P: SetPredictor,
    P::Input: Sized,
    L: SetLoss<Set = P::Set>,
    L::Label: Sized,
{
    pub fn new(inputs: Vec<P::Input>, labels: Vec<L::Label>, family: P, loss: L, grid: LambdaGrid) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} inputs for {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        let pairs: Vec<(&P::Input, &L::Label)> = inputs.iter().zip(&labels).collect();
        let pool_losses = compute_loss_matrix(&pairs, &family, &loss, &grid)?;
        Ok(Self {
            inputs,
            labels,
            family,
            loss,
            pool_losses,
        })
    }

    pub fn pool_losses(&self) -> &LossMatrix {
        &self.pool_losses
    }
}

impl<P, L> Scenario for GridScenario<P, L>
where
    P: SetPredictor,
    P::Input: Sized,
    L: SetLoss<Set = P::Set>,
    L::Label: Sized,
{
    fn pool_size(&self) -> usize {
        self.inputs.len()
    }

    fn calibrate(&self, calibration: &[usize], method: Method, config: &ControlConfig) -> Result<f64> {
        let matrix = self.pool_losses.select_rows(calibration)?;
        let result = match method {
            Method::Clcp => clcp_search(&matrix, config)?,
            Method::Crc => crc_search(&matrix, config.alpha)?,
        };
        Ok(result.lambda_star)
    }

    fn evaluate(&self, index: usize, lambda: f64) -> Result<(f64, f64)> {
        let set = self.family.predict(&self.inputs[index], lambda);
        Ok((self.loss.loss(&self.labels[index], &set)?, set.size()))
    }
}

/// Prediction-band scenario searched with the coarse-to-fine ladder.
pub struct BandScenario {
    forecasts: Vec<BandForecast>,
    truths: Vec<Array2<f64>>,
    profiles: Vec<BandMissProfile>,
    ladder: Vec<f64>,
    refine_points: usize,
}

/// `100, 10, 1, 0.1, 0.01, 0.001`.
pub fn default_ladder() -> Vec<f64> {
    (0..6).map(|e| 100.0 / 10f64.powi(e)).collect()
}

impl BandScenario {
    pub fn new(
        forecasts: Vec<BandForecast>,
        truths: Vec<Array2<f64>>,
        ladder: Vec<f64>,
        refine_points: usize,
    ) -> Result<Self> {
        if forecasts.len() != truths.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} forecasts for {} truth fields",
                forecasts.len(),
                truths.len()
            )));
        }
        let profiles = forecasts
            .iter()
            .zip(&truths)
            .map(|(f, t)| BandMissProfile::new(f, t))
            .collect::<Result<_>>()?;
        Ok(Self {
            forecasts,
            truths,
            profiles,
            ladder,
            refine_points,
        })
    }
}

impl Scenario for BandScenario {
    fn pool_size(&self) -> usize {
        self.forecasts.len()
    }

    fn calibrate(&self, calibration: &[usize], method: Method, config: &ControlConfig) -> Result<f64> {
        if method != Method::Clcp {
            return Err(Error::invalid("the band task only supports the two-step CLCP search"));
        }
        let evaluate = |lambda: f64| Ok(calibration.iter().map(|&i| self.profiles[i].loss_at(lambda)).collect());
        let outcome = two_step_search(evaluate, 1.0, config, &self.ladder, self.refine_points)?;
        Ok(outcome.result.lambda_star)
    }

    fn evaluate(&self, index: usize, lambda: f64) -> Result<(f64, f64)> {
        let forecast = &self.forecasts[index];
        let band = QuantileBands.predict(forecast, lambda);
        let loss = crate::losses::band_miscoverage_rate(&self.truths[index], &band)?;
        Ok((loss, forecast.scale.average_interval_length(lambda)))
    }
}

/// Outcome of one trial; the λ/loss fields are empty when calibration was
/// infeasible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub lambda_star: Option<f64>,
    pub loss: Option<f64>,
    pub exceeded: Option<bool>,
    pub efficiency: Option<f64>,
}

/// Aggregate over trials. Infeasible trials are counted in
/// `infeasible_trials` and excluded from every other statistic, so
/// `trials` is the number of evaluated trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trials: usize,
    pub infeasible_trials: usize,
    pub exceedance_count: usize,
    pub exceedance_frequency: f64,
    pub mean_loss: f64,
    /// Sample standard deviation of the per-trial test loss.
    pub loss_sd: f64,
    /// Mean set size, normalized mask size or mean interval length.
    pub efficiency: f64,
    pub mean_lambda_star: f64,
}

impl TrialReport {
    pub fn from_records(records: &[TrialRecord]) -> Self {
        let evaluated: Vec<&TrialRecord> = records.iter().filter(|r| r.lambda_star.is_some()).collect();
        let trials = evaluated.len();
        let mean = |f: &dyn Fn(&TrialRecord) -> f64| {
            if trials == 0 {
                0.0
            } else {
                evaluated.iter().map(|r| f(r)).sum::<f64>() / trials as f64
            }
        };
        let exceedance_count = evaluated.iter().filter(|r| r.exceeded == Some(true)).count();
        let mean_loss = mean(&|r| r.loss.unwrap_or(0.0));
        let loss_sd = if trials > 1 {
            let ss: f64 = evaluated
                .iter()
                .map(|r| (r.loss.unwrap_or(0.0) - mean_loss).powi(2))
                .sum();
            (ss / (trials - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            trials,
            infeasible_trials: records.len() - trials,
            exceedance_count,
            exceedance_frequency: if trials == 0 {
                0.0
            } else {
                exceedance_count as f64 / trials as f64
            },
            mean_loss,
            loss_sd,
            efficiency: mean(&|r| r.efficiency.unwrap_or(0.0)),
            mean_lambda_star: mean(&|r| r.lambda_star.unwrap_or(0.0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub report: TrialReport,
    pub records: Vec<TrialRecord>,
}

/// Trial `t` uses ChaCha8 seeded with `seed` on stream `t`, so each trial's
/// draw depends only on `(seed, t)`.
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

/// Runs `trials` independent calibrate-then-test rounds with `n_calibration`
/// calibration samples each.
pub fn run_guarantee_experiment<S: Scenario + ?Sized>(
    scenario: &S,
    method: Method,
    config: &ControlConfig,
    n_calibration: usize,
    trials: usize,
    seed: u64,
) -> Result<ExperimentOutcome> {
    if n_calibration == 0 {
        return Err(Error::EmptyInput("calibration set size"));
    }
    if scenario.pool_size() < n_calibration + 1 {
        return Err(Error::invalid(format!(
            "pool of {} samples cannot supply {n_calibration} calibration points and a test point",
            scenario.pool_size()
        )));
    }
    if method == Method::Clcp {
        config.check_sample_size(n_calibration)?;
    }

    let mut indices: Vec<usize> = (0..scenario.pool_size()).collect();
    let mut records = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = trial_rng(seed, trial);
        indices.sort_unstable();
        let (drawn, _) = indices.partial_shuffle(&mut rng, n_calibration + 1);
        let (calibration, test) = drawn.split_at(n_calibration);
        let record = match scenario.calibrate(calibration, method, config) {
            Ok(lambda) => {
                let (loss, efficiency) = scenario.evaluate(test[0], lambda)?;
                TrialRecord {
                    trial,
                    lambda_star: Some(lambda),
                    loss: Some(loss),
                    exceeded: Some(loss > config.alpha),
                    efficiency: Some(efficiency),
                }
            }
            Err(Error::Infeasible { .. }) => TrialRecord {
                trial,
                lambda_star: None,
                loss: None,
                exceeded: None,
                efficiency: None,
            },
            Err(e) => return Err(e),
        };
        records.push(record);
    }
    Ok(ExperimentOutcome {
        report: TrialReport::from_records(&records),
        records,
    })
}

/// One `(alpha, delta)` cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub alpha: f64,
    pub delta: f64,
    pub report: TrialReport,
    #[serde(skip)]
    pub records: Vec<TrialRecord>,
}

/// Runs the experiment for every `(alpha, delta)` pair, alpha-major. All pairs
/// share the root seed and hence the same per-trial draws.
pub fn run_sweep<S: Scenario + ?Sized>(
    scenario: &S,
    method: Method,
    alphas: &[f64],
    deltas: &[f64],
    n_calibration: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<SweepEntry>> {
    let mut entries = Vec::with_capacity(alphas.len() * deltas.len());
    for &alpha in alphas {
        for &delta in deltas {
            let config = ControlConfig::new(alpha, delta)?;
            let outcome = run_guarantee_experiment(scenario, method, &config, n_calibration, trials, seed)?;
            entries.push(SweepEntry {
                alpha,
                delta,
                report: outcome.report,
                records: outcome.records,
            });
        }
    }
    Ok(entries)
}

/// `delta + 3·sqrt(delta(1 - delta)/trials)`: the largest exceedance
/// frequency consistent with a true rate of `delta` at three binomial
/// standard errors.
pub fn exceedance_tolerance(delta: f64, trials: usize) -> f64 {
    delta + 3.0 * (delta * (1.0 - delta) / trials as f64).sqrt()
}
