//! Small point predictors that feed the set predictor families: a softmax
//! classifier and a linear quantile regressor, both trained by full-batch
//! gradient descent from zero weights.
//!
//! Training never accepts a step that raises the training objective: a step
//! that would is retried at half the learning rate. Checkpointed training
//! losses are therefore non-increasing.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ClassProbs;

/// Version tag written into saved models.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Quantile levels predicted by [`QuantileModel`].
pub const QUANTILE_LEVELS: [f64; 3] = [0.05, 0.5, 0.95];

const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Record the training loss every this many epochs (and at the end).
    pub checkpoint_every: usize,
}

impl TrainOptions {
    pub fn new(learning_rate: f64, epochs: usize) -> Self {
        Self {
            learning_rate,
            epochs,
            checkpoint_every: 10,
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::invalid("checkpoint_every must be positive"));
        }
        Ok(())
    }
}

/// Training objective recorded at checkpoints, epoch 0 first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub checkpoints: Vec<(usize, f64)>,
}

fn check_features(features: &[Vec<f64>]) -> Result<usize> {
    let d = features
        .first()
        .map(Vec::len)
        .ok_or(Error::EmptyInput("training features"))?;
    if let Some((i, row)) = features.iter().enumerate().find(|(_, r)| r.len() != d) {
        return Err(Error::DimensionMismatch(format!(
            "feature row {i} has {} columns, expected {d}",
            row.len()
        )));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("features must be finite"));
    }
    Ok(d)
}

/// Generic descent loop shared by both models.
fn descend<O, G>(weights: &mut Vec<f64>, options: &TrainOptions, objective: O, mut gradient: G) -> TrainingTrace
where
    O: Fn(&[f64]) -> f64,
    G: FnMut(&[f64], &mut [f64]),
{
    let mut trace = TrainingTrace::default();
    let mut current = objective(weights);
    trace.checkpoints.push((0, current));
    let mut grad = vec![0.0; weights.len()];
    let mut candidate = weights.clone();
    let mut lr = options.learning_rate;
    for epoch in 1..=options.epochs {
        gradient(weights, &mut grad);
        for _ in 0..MAX_HALVINGS {
            for ((c, w), g) in candidate.iter_mut().zip(weights.iter()).zip(&grad) {
                *c = w - lr * g;
            }
            let next = objective(&candidate);
            if next <= current {
                std::mem::swap(weights, &mut candidate);
                current = next;
                break;
            }
            lr *= 0.5;
        }
        if epoch % options.checkpoint_every == 0 || epoch == options.epochs {
            trace.checkpoints.push((epoch, current));
        }
    }
    trace
}

/// Multinomial logistic regression: `K × (d + 1)` weights, bias last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxModel {
    pub format_version: u32,
    pub num_classes: usize,
    pub num_features: usize,
    /// Row-major, `num_classes` rows of `num_features + 1`.
    pub weights: Vec<f64>,
}

impl SoftmaxModel {
    pub fn zeros(num_classes: usize, num_features: usize) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            num_classes,
            num_features,
            weights: vec![0.0; num_classes * (num_features + 1)],
        }
    }

    fn logits_into(weights: &[f64], k: usize, x: &[f64], out: &mut [f64]) {
        let stride = x.len() + 1;
        for (c, o) in out.iter_mut().enumerate().take(k) {
            let w = &weights[c * stride..(c + 1) * stride];
            *o = w[..x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[x.len()];
        }
    }

    fn softmax_in_place(z: &mut [f64]) {
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in z.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in z.iter_mut() {
            *v /= total;
        }
    }

    pub fn predict_raw(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.num_features {
            return Err(Error::DimensionMismatch(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.num_features
            )));
        }
        let mut z = vec![0.0; self.num_classes];
        Self::logits_into(&self.weights, self.num_classes, x, &mut z);
        Self::softmax_in_place(&mut z);
        Ok(z)
    }

    pub fn predict(&self, x: &[f64]) -> Result<ClassProbs> {
        let mut p = self.predict_raw(x)?;
        // absorb rounding so the sum check in ClassProbs always passes
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v = (*v / total).clamp(0.0, 1.0));
        ClassProbs::new(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported model format version {}",
                model.format_version
            )));
        }
        if model.weights.len() != model.num_classes * (model.num_features + 1) {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} classes and {} features",
                model.weights.len(),
                model.num_classes,
                model.num_features
            )));
        }
        if model.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("model weights must be finite"));
        }
        Ok(model)
    }
}

fn cross_entropy(weights: &[f64], k: usize, features: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut z = vec![0.0; k];
    let mut total = 0.0;
    for (x, &y) in features.iter().zip(labels) {
        SoftmaxModel::logits_into(weights, k, x, &mut z);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_norm = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += log_norm - z[y];
    }
    total / features.len() as f64
}

/// Fits a softmax classifier to `labels` in `0..num_classes`.
pub fn train_softmax(
    features: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    options: &TrainOptions,
) -> Result<(SoftmaxModel, TrainingTrace)> {
    options.check()?;
    let d = check_features(features)?;
    if labels.len() != features.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} feature rows",
            labels.len(),
            features.len()
        )));
    }
    if num_classes < 2 {
        return Err(Error::invalid("softmax needs at least two classes"));
    }
    if features.len() < num_classes {
        return Err(Error::DegenerateData(format!(
            "{} samples for {num_classes} classes",
            features.len()
        )));
    }
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        *counts
            .get_mut(y)
            .ok_or_else(|| Error::invalid(format!("label {y} outside 0..{num_classes}")))? += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::DegenerateData(format!("class {missing} has no samples")));
    }

    let k = num_classes;
    let stride = d + 1;
    let n = features.len() as f64;
    let mut model = SoftmaxModel::zeros(k, d);
    let trace = descend(
        &mut model.weights,
        options,
        |w| cross_entropy(w, k, features, labels),
        |w, grad| {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut p = vec![0.0; k];
            for (x, &y) in features.iter().zip(labels) {
                SoftmaxModel::logits_into(w, k, x, &mut p);
                SoftmaxModel::softmax_in_place(&mut p);
                for c in 0..k {
                    let err = (p[c] - f64::from(u8::from(c == y))) / n;
                    let g = &mut grad[c * stride..(c + 1) * stride];
                    for (gj, xj) in g[..d].iter_mut().zip(x) {
                        *gj += err * xj;
                    }
                    g[d] += err;
                }
            }
        },
    );
    Ok((model, trace))
}

/// Pinball (check) loss of residual `target - prediction` at level `tau`.
pub fn pinball_loss(tau: f64, target: f64, prediction: f64) -> f64 {
    let r = target - prediction;
    if r >= 0.0 {
        tau * r
    } else {
        (tau - 1.0) * r
    }
}

/// Subgradient of [`pinball_loss`] with respect to the prediction; 0 at the
/// kink.
pub fn pinball_subgradient(tau: f64, target: f64, prediction: f64) -> f64 {
    let r = target - prediction;
    if r > 0.0 {
        -tau
    } else if r < 0.0 {
        1.0 - tau
    } else {
        0.0
    }
}

/// Three linear quantile regressors, one per level in [`QUANTILE_LEVELS`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileModel {
    pub format_version: u32,
    pub num_features: usize,
    pub levels: [f64; 3],
    /// One weight vector of length `num_features + 1` (bias last) per level.
    pub weights: [Vec<f64>; 3],
}

fn linear(w: &[f64], x: &[f64]) -> f64 {
    w[..x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[x.len()]
}

impl QuantileModel {
    /// Unsorted predictions at the three levels.
    pub fn predict(&self, x: &[f64]) -> Result<[f64; 3]> {
        if x.len() != self.num_features {
            return Err(Error::DimensionMismatch(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.num_features
            )));
        }
        Ok([0, 1, 2].map(|l| linear(&self.weights[l], x)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported model format version {}",
                model.format_version
            )));
        }
        if model.weights.iter().any(|w| w.len() != model.num_features + 1) {
            return Err(Error::DimensionMismatch("quantile weight length".into()));
        }
        if model.weights.iter().flatten().any(|w| !w.is_finite()) {
            return Err(Error::invalid("model weights must be finite"));
        }
        Ok(model)
    }
}

/// Mean pinball loss of a single linear quantile head.
pub fn pinball_objective(weights: &[f64], tau: f64, features: &[Vec<f64>], targets: &[f64]) -> f64 {
    features
        .iter()
        .zip(targets)
        .map(|(x, &y)| pinball_loss(tau, y, linear(weights, x)))
        .sum::<f64>()
        / features.len() as f64
}

/// Subgradient of [`pinball_objective`] with respect to the weights.
pub fn pinball_objective_gradient(weights: &[f64], tau: f64, features: &[Vec<f64>], targets: &[f64], grad: &mut [f64]) {
    let d = weights.len() - 1;
    let n = features.len() as f64;
    grad.iter_mut().for_each(|g| *g = 0.0);
    for (x, &y) in features.iter().zip(targets) {
        let s = pinball_subgradient(tau, y, linear(weights, x)) / n;
        for (g, xj) in grad[..d].iter_mut().zip(x) {
            *g += s * xj;
        }
        grad[d] += s;
    }
}

/// Fits one linear head per level by subgradient descent on the pinball loss.
/// The returned trace sums the three heads' objectives.
pub fn train_quantile_regressor(
    features: &[Vec<f64>],
    targets: &[f64],
    options: &TrainOptions,
) -> Result<(QuantileModel, TrainingTrace)> {
    options.check()?;
    let d = check_features(features)?;
    if targets.len() != features.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} targets for {} feature rows",
            targets.len(),
            features.len()
        )));
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("targets must be finite"));
    }
    if features.len() < 2 {
        return Err(Error::DegenerateData(
            "quantile regression needs at least two samples".into(),
        ));
    }

    let mut weights: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; d + 1]);
    let mut traces = Vec::new();
    for (w, &tau) in weights.iter_mut().zip(&QUANTILE_LEVELS) {
        traces.push(descend(
            w,
            options,
            |w| pinball_objective(w, tau, features, targets),
            |w, g| pinball_objective_gradient(w, tau, features, targets, g),
        ));
    }
    let checkpoints = traces[0]
        .checkpoints
        .iter()
        .enumerate()
        .map(|(c, &(epoch, _))| (epoch, traces.iter().map(|t| t.checkpoints[c].1).sum()))
        .collect();
    Ok((
        QuantileModel {
            format_version: MODEL_FORMAT_VERSION,
            num_features: d,
            levels: QUANTILE_LEVELS,
            weights,
        },
        TrainingTrace { checkpoints },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn two_blobs(seed: u64, n: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let c = if y == 0 { -2.5 } else { 2.5 };
            xs.push(vec![c + noise.sample(&mut rng), c + noise.sample(&mut rng)]);
            ys.push(y);
        }
        (xs, ys)
    }

    fn non_increasing(trace: &TrainingTrace) -> bool {
        trace.checkpoints.windows(2).all(|w| w[1].1 <= w[0].1)
    }

    #[test]
    fn softmax_separates_blobs() {
        let (xs, ys) = two_blobs(7, 200);
        let (model, trace) = train_softmax(&xs, &ys, 2, &TrainOptions::new(0.5, 200)).unwrap();
        assert!(non_increasing(&trace));
        let correct = xs
            .iter()
            .zip(&ys)
            .filter(|(x, &y)| {
                let p = model.predict(x).unwrap();
                (p.as_slice()[1] > p.as_slice()[0]) == (y == 1)
            })
            .count();
        assert!(correct as f64 / 200.0 >= 0.95, "accuracy {correct}/200");
    }

    #[test]
    fn softmax_follows_label_frequencies() {
        let xs = vec![vec![1.0]; 10];
        let ys = vec![0, 0, 0, 1, 1, 1, 1, 1, 1, 1];
        let (model, _) = train_softmax(&xs, &ys, 2, &TrainOptions::new(0.5, 300)).unwrap();
        let p = model.predict(&[1.0]).unwrap();
        assert!(p.as_slice()[1] > p.as_slice()[0]);
        assert!((p.as_slice()[1] - 0.7).abs() < 0.05);
    }

    #[test]
    fn zero_epochs_is_uniform() {
        let (xs, ys) = two_blobs(1, 30);
        let xs3: Vec<Vec<f64>> = xs.clone();
        let ys3: Vec<usize> = ys.iter().enumerate().map(|(i, _)| i % 3).collect();
        let (model, trace) = train_softmax(&xs3, &ys3, 3, &TrainOptions::new(0.1, 0)).unwrap();
        assert_eq!(trace.checkpoints.len(), 1);
        for x in &xs {
            let p = model.predict(x).unwrap();
            assert!(p.as_slice().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
        }
    }

    #[test]
    fn softmax_rejects_missing_class() {
        let xs = vec![vec![0.0]; 4];
        let err = train_softmax(&xs, &[0, 0, 0, 0], 2, &TrainOptions::new(0.1, 5)).unwrap_err();
        assert_eq!(err.code(), "DEGENERATE_DATA");
    }

    #[test]
    fn softmax_outputs_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = SoftmaxModel {
            format_version: MODEL_FORMAT_VERSION,
            num_classes: 4,
            num_features: 3,
            weights: (0..16).map(|_| rng.random_range(-30.0..30.0)).collect(),
        };
        for _ in 0..200 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-10.0..10.0)).collect();
            let p = model.predict_raw(&x).unwrap();
            assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (xs, ys) = two_blobs(9, 60);
        let a = train_softmax(&xs, &ys, 2, &TrainOptions::new(0.3, 50)).unwrap();
        let b = train_softmax(&xs, &ys, 2, &TrainOptions::new(0.3, 50)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn model_save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (xs, ys) = two_blobs(4, 40);
        let (model, _) = train_softmax(&xs, &ys, 2, &TrainOptions::new(0.3, 20)).unwrap();
        let path = dir.path().join("softmax.json");
        model.save(&path).unwrap();
        assert_eq!(SoftmaxModel::load(&path).unwrap(), model);

        let targets: Vec<f64> = xs.iter().map(|x| x[0]).collect();
        let (q, _) = train_quantile_regressor(&xs, &targets, &TrainOptions::new(0.1, 20)).unwrap();
        let path = dir.path().join("quantile.json");
        q.save(&path).unwrap();
        assert_eq!(QuantileModel::load(&path).unwrap(), q);
    }

    #[test]
    fn constant_target_collapses_quantiles() {
        let xs = vec![vec![0.0]; 50];
        let ys = vec![3.0; 50];
        let (model, trace) = train_quantile_regressor(&xs, &ys, &TrainOptions::new(1.0, 2000)).unwrap();
        assert!(non_increasing(&trace));
        for q in model.predict(&[0.0]).unwrap() {
            assert!((q - 3.0).abs() < 0.05, "{q}");
        }
    }

    #[test]
    fn median_of_uniform_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ys: Vec<f64> = (0..400).map(|_| rng.random::<f64>()).collect();
        let xs = vec![vec![1.0]; 400];
        let (model, trace) = train_quantile_regressor(&xs, &ys, &TrainOptions::new(0.5, 3000)).unwrap();
        assert!(non_increasing(&trace));
        let [_, median, _] = model.predict(&[1.0]).unwrap();
        let mut sorted = ys.clone();
        sorted.sort_by(f64::total_cmp);
        let empirical = 0.5 * (sorted[199] + sorted[200]);
        assert!((0.4..=0.6).contains(&median), "{median}");
        assert!((median - empirical).abs() < 0.02, "{median} vs {empirical}");
    }

    #[test]
    fn pinball_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let xs: Vec<Vec<f64>> = (0..30)
            .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| x[0] - 0.5 * x[1] + rng.random_range(-0.3..0.3))
            .collect();
        let h = 1e-7;
        let mut checked = 0;
        while checked < 10 {
            let w: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            // stay away from kinks: no residual within reach of the perturbation
            let nearest = xs
                .iter()
                .zip(&ys)
                .map(|(x, y)| (y - linear(&w, x)).abs())
                .fold(f64::INFINITY, f64::min);
            if nearest < 1e-4 {
                continue;
            }
            checked += 1;
            for tau in QUANTILE_LEVELS {
                let mut grad = vec![0.0; 3];
                pinball_objective_gradient(&w, tau, &xs, &ys, &mut grad);
                for j in 0..3 {
                    let mut up = w.clone();
                    let mut down = w.clone();
                    up[j] += h;
                    down[j] -= h;
                    let fd =
                        (pinball_objective(&up, tau, &xs, &ys) - pinball_objective(&down, tau, &xs, &ys)) / (2.0 * h);
                    let rel = (fd - grad[j]).abs() / grad[j].abs().max(1e-8);
                    assert!(rel < 1e-4, "tau {tau} weight {j}: {fd} vs {}", grad[j]);
                }
            }
        }
    }
}
