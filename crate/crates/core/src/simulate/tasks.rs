//! The three built-in tasks: synthetic data, a trained model, and the
//! non-training pool of model outputs that trials draw from.

use ndarray::Array2;

use super::data::{cell_features, gen_classification, gen_grid_fields, FeatureSet, GridFieldOptions, GridSample};
use super::experiment::{default_ladder, BandScenario, GridScenario};
use crate::error::{Error, Result};
use crate::losses::{ClassLossTable, ClassVarying, FalseNegativeRate};
use crate::models::{train_quantile_regressor, train_softmax, QuantileModel, SoftmaxModel, TrainOptions};
use crate::predictors::{BandForecast, SegmentationSets, ThresholdLabelSets};
use crate::types::{ClassProbs, GridMask, LambdaGrid, ProbGrid, QuantileTripleGrid};

/// Fraction of generated samples used for model training by default.
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Segmentation,
    Band,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(Self::Classification),
            "segmentation" => Ok(Self::Segmentation),
            "band" => Ok(Self::Band),
            other => Err(Error::invalid(format!("unknown task {other:?}"))),
        }
    }
}

fn train_count(n_total: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction must be in (0, 1), got {fraction}"
        )));
    }
    Ok((n_total as f64 * fraction).round() as usize)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationTaskOptions {
    pub n_total: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub train_fraction: f64,
    pub training: TrainOptions,
}

impl Default for ClassificationTaskOptions {
    fn default() -> Self {
        Self {
            n_total: 2000,
            num_classes: 3,
            dim: 4,
            separation: 1.0,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            training: TrainOptions::new(0.5, 200),
        }
    }
}

/// Softmax classifier on a Gaussian mixture with class-varying loss.
#[derive(Debug, Clone)]
pub struct ClassificationTask {
    pub model: SoftmaxModel,
    pub loss_table: ClassLossTable,
    pub pool_probs: Vec<ClassProbs>,
    pub pool_labels: Vec<usize>,
}

impl ClassificationTask {
    pub fn build(seed: u64, opts: &ClassificationTaskOptions) -> Result<Self> {
        let data = gen_classification(seed, opts.n_total, opts.num_classes, opts.dim, opts.separation)?;
        let n_train = train_count(data.len(), opts.train_fraction)?;
        let (model, _) = train_softmax(
            &data.features[..n_train],
            &data.labels[..n_train],
            data.num_classes,
            &opts.training,
        )?;
        let pool_probs = data.features[n_train..]
            .iter()
            .map(|x| model.predict(x))
            .collect::<Result<_>>()?;
        Ok(Self {
            model,
            loss_table: data.loss_table,
            pool_probs,
            pool_labels: data.labels[n_train..].to_vec(),
        })
    }

    pub fn scenario(self) -> Result<GridScenario<ThresholdLabelSets, ClassVarying>> {
        GridScenario::new(
            self.pool_probs,
            self.pool_labels,
            ThresholdLabelSets,
            ClassVarying(self.loss_table),
            LambdaGrid::unit_interval(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridTaskOptions {
    pub n_total: usize,
    pub fields: GridFieldOptions,
    pub features: FeatureSet,
    pub train_fraction: f64,
    pub training: TrainOptions,
}

impl GridTaskOptions {
    /// 16×16 fields, event threshold 1.
    pub fn segmentation() -> Self {
        Self {
            n_total: 500,
            fields: GridFieldOptions::new(16, 16, 2, 1.0),
            features: FeatureSet::Strong,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            training: TrainOptions::new(0.5, 150),
        }
    }

    /// 8×8 fields.
    pub fn band() -> Self {
        Self {
            n_total: 500,
            fields: GridFieldOptions::new(8, 8, 1, 1.0),
            features: FeatureSet::Strong,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            training: TrainOptions::new(0.5, 150),
        }
    }
}

fn split_fields(seed: u64, opts: &GridTaskOptions) -> Result<(Vec<GridSample>, Vec<GridSample>)> {
    let mut samples = gen_grid_fields(seed, opts.n_total, &opts.fields)?.samples;
    let n_train = train_count(samples.len(), opts.train_fraction)?;
    let pool = samples.split_off(n_train);
    Ok((samples, pool))
}

/// Cell-wise logistic model producing event probability grids, with FNR loss.
#[derive(Debug, Clone)]
pub struct SegmentationTask {
    pub model: SoftmaxModel,
    pub features: FeatureSet,
    pub pool_grids: Vec<ProbGrid>,
    pub pool_masks: Vec<GridMask>,
}

/// Event probability per cell under a two-class cell model.
pub fn predict_prob_grid(model: &SoftmaxModel, forecast: &Array2<f64>, features: FeatureSet) -> Result<ProbGrid> {
    let probs = cell_features(forecast, features)
        .iter()
        .map(|x| model.predict(x).map(|p| p.as_slice()[1]))
        .collect::<Result<Vec<_>>>()?;
    let grid = Array2::from_shape_vec(forecast.dim(), probs).map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    ProbGrid::new(grid)
}

impl SegmentationTask {
    pub fn build(seed: u64, opts: &GridTaskOptions) -> Result<Self> {
        let (train, pool) = split_fields(seed, opts)?;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for s in &train {
            x.extend(cell_features(&s.forecast, opts.features));
            y.extend(s.mask.cells().iter().map(|&c| usize::from(c)));
        }
        let (model, _) = train_softmax(&x, &y, 2, &opts.training)?;
        let pool_grids = pool
            .iter()
            .map(|s| predict_prob_grid(&model, &s.forecast, opts.features))
            .collect::<Result<_>>()?;
        Ok(Self {
            model,
            features: opts.features,
            pool_grids,
            pool_masks: pool.into_iter().map(|s| s.mask).collect(),
        })
    }

    pub fn scenario(self) -> Result<GridScenario<SegmentationSets, FalseNegativeRate>> {
        GridScenario::new(
            self.pool_grids,
            self.pool_masks,
            SegmentationSets,
            FalseNegativeRate,
            LambdaGrid::unit_interval(),
        )
    }
}

/// Cell-wise linear quantile regression producing sorted quantile triples.
#[derive(Debug, Clone)]
pub struct BandTask {
    pub model: QuantileModel,
    pub features: FeatureSet,
    pub pool_forecasts: Vec<BandForecast>,
    pub pool_truths: Vec<Array2<f64>>,
}

/// Quantile triple per cell; crossed quantiles are sorted per cell.
pub fn predict_triple_grid(
    model: &QuantileModel,
    forecast: &Array2<f64>,
    features: FeatureSet,
) -> Result<QuantileTripleGrid> {
    let dim = forecast.dim();
    let triples = cell_features(forecast, features)
        .iter()
        .map(|x| model.predict(x))
        .collect::<Result<Vec<_>>>()?;
    let level = |l: usize| {
        Array2::from_shape_vec(dim, triples.iter().map(|t| t[l]).collect())
            .map_err(|e| Error::DimensionMismatch(e.to_string()))
    };
    QuantileTripleGrid::new(level(0)?, level(1)?, level(2)?)
}

impl BandTask {
    pub fn build(seed: u64, opts: &GridTaskOptions) -> Result<Self> {
        let (train, pool) = split_fields(seed, opts)?;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for s in &train {
            x.extend(cell_features(&s.forecast, opts.features));
            y.extend(s.label.iter().copied());
        }
        let (model, _) = train_quantile_regressor(&x, &y, &opts.training)?;
        let pool_forecasts = pool
            .iter()
            .map(|s| predict_triple_grid(&model, &s.forecast, opts.features).map(BandForecast::new))
            .collect::<Result<_>>()?;
        Ok(Self {
            model,
            features: opts.features,
            pool_forecasts,
            pool_truths: pool.into_iter().map(|s| s.label).collect(),
        })
    }

    /// Two-step search over the default ladder with 100 refinement points.
    pub fn scenario(self) -> Result<BandScenario> {
        BandScenario::new(self.pool_forecasts, self.pool_truths, default_ladder(), 100)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_model_has_signal() {
        let task = ClassificationTask::build(1, &ClassificationTaskOptions::default()).unwrap();
        let correct = task
            .pool_probs
            .iter()
            .zip(&task.pool_labels)
            .filter(|(p, &y)| {
                let s = p.as_slice();
                (0..s.len()).all(|k| s[k] <= s[y])
            })
            .count();
        assert!(correct as f64 / task.pool_labels.len() as f64 > 0.5);
        assert_eq!(task.pool_labels.len(), 720);
    }

    #[test]
    fn segmentation_pool_shapes() {
        let mut opts = GridTaskOptions::segmentation();
        opts.n_total = 60;
        opts.training.epochs = 20;
        let task = SegmentationTask::build(2, &opts).unwrap();
        assert_eq!(task.pool_grids.len(), 22);
        assert!(task.pool_grids.iter().all(|g| g.dim() == (16, 16)));
        assert!(task.pool_masks.iter().all(|m| m.count() >= 1));
    }

    #[test]
    fn band_triples_are_ordered() {
        let mut opts = GridTaskOptions::band();
        opts.n_total = 40;
        opts.training.epochs = 30;
        let task = BandTask::build(3, &opts).unwrap();
        for f in &task.pool_forecasts {
            let t = &f.triple;
            assert!(ndarray::Zip::from(t.q05())
                .and(t.q50())
                .and(t.q95())
                .all(|a, b, c| a <= b && b <= c));
        }
    }

    #[test]
    fn task_names_parse() {
        assert_eq!("band".parse::<TaskKind>().unwrap(), TaskKind::Band);
        assert!("other".parse::<TaskKind>().is_err());
    }
}
