//! Synthetic exchangeable datasets: Gaussian-mixture classification and
//! smooth random grid fields with a thresholded event mask.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::losses::ClassLossTable;
use crate::types::GridMask;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationData {
    pub features: Vec<Vec<f64>>,
    /// Class indices in `0..num_classes`.
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Per-class miss penalties, drawn uniformly on (0, 1).
    pub loss_table: ClassLossTable,
}

impl ClassificationData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// i.i.d. draws from a K-component Gaussian mixture in `d` dimensions.
///
/// Class means are `separation · m_k` with `m_k ~ N(0, I)`; each point is its
/// class mean plus `N(0, I)` noise; labels are uniform over the classes.
pub fn gen_classification(
    seed: u64,
    n_total: usize,
    num_classes: usize,
    dim: usize,
    separation: f64,
) -> Result<ClassificationData> {
    if num_classes < 2 {
        return Err(Error::invalid("classification needs at least two classes"));
    }
    if dim == 0 {
        return Err(Error::invalid("feature dimension must be at least 1"));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(Error::invalid(format!(
            "separation must be non-negative, got {separation}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| separation * std_normal(&mut rng)).collect())
        .collect();
    let loss_table = ClassLossTable::new((0..num_classes).map(|_| open_unit(&mut rng)).collect())?;

    let mut features = Vec::with_capacity(n_total);
    let mut labels = Vec::with_capacity(n_total);
    for _ in 0..n_total {
        let y = rng.random_range(0..num_classes);
        let x = means[y].iter().map(|m| m + std_normal(&mut rng)).collect();
        features.push(x);
        labels.push(y);
    }
    Ok(ClassificationData {
        features,
        labels,
        num_classes,
        loss_table,
    })
}

/// One synthetic field sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSample {
    /// Noisy forecast of the latent field; the model input.
    pub forecast: Array2<f64>,
    /// Observed real-valued field.
    pub label: Array2<f64>,
    /// Cells where `label` exceeds the event threshold; never empty.
    pub mask: GridMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridData {
    pub samples: Vec<GridSample>,
    /// Draws needed to collect the samples, including rejected ones.
    pub draws: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridFieldOptions {
    pub rows: usize,
    pub cols: usize,
    /// Box-blur radius applied (twice) to white noise.
    pub smoothness: usize,
    pub event_threshold: f64,
    /// Standard deviation of the per-field offset added to the latent field.
    pub anomaly_sd: f64,
    pub forecast_noise_sd: f64,
    pub label_noise_sd: f64,
}

impl GridFieldOptions {
    pub fn new(rows: usize, cols: usize, smoothness: usize, event_threshold: f64) -> Self {
        Self {
            rows,
            cols,
            smoothness,
            event_threshold,
            anomaly_sd: 0.5,
            forecast_noise_sd: 0.5,
            label_noise_sd: 0.3,
        }
    }
}

/// Mean over the `(2r+1)²` window, truncated at the edges.
pub fn box_blur(field: &Array2<f64>, radius: usize) -> Array2<f64> {
    let (rows, cols) = field.dim();
    Array2::from_shape_fn((rows, cols), |(p, q)| {
        let (p0, p1) = (p.saturating_sub(radius), (p + radius).min(rows - 1));
        let (q0, q1) = (q.saturating_sub(radius), (q + radius).min(cols - 1));
        let mut total = 0.0;
        for pp in p0..=p1 {
            for qq in q0..=q1 {
                total += field[(pp, qq)];
            }
        }
        total / ((p1 - p0 + 1) * (q1 - q0 + 1)) as f64
    })
}

fn latent_field(rng: &mut ChaCha8Rng, opts: &GridFieldOptions) -> Array2<f64> {
    let white = Array2::from_shape_fn((opts.rows, opts.cols), |_| std_normal(rng));
    let smooth = box_blur(&box_blur(&white, opts.smoothness), opts.smoothness);
    let mean = smooth.mean().unwrap_or(0.0);
    let sd = smooth.std(0.0);
    let offset = opts.anomaly_sd * std_normal(rng);
    smooth.mapv(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 } + offset)
}

/// Smooth correlated fields, kept only when at least one cell is an event.
///
/// Fails with [`Error::FilterExhausted`] when fewer than `n_total` samples
/// pass within `100 · n_total` draws.
pub fn gen_grid_fields(seed: u64, n_total: usize, opts: &GridFieldOptions) -> Result<GridData> {
    if opts.rows < 2 || opts.cols < 2 {
        return Err(Error::invalid("grid fields need at least 2×2 cells"));
    }
    let forecast_noise =
        Normal::new(0.0, opts.forecast_noise_sd).map_err(|e| Error::invalid(format!("forecast noise: {e}")))?;
    let label_noise = Normal::new(0.0, opts.label_noise_sd).map_err(|e| Error::invalid(format!("label noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_draws = 100 * n_total;
    let mut samples = Vec::with_capacity(n_total);
    let mut draws = 0;
    while samples.len() < n_total {
        if draws == max_draws {
            return Err(Error::FilterExhausted {
                requested: n_total,
                accepted: samples.len(),
                draws,
            });
        }
        draws += 1;
        let latent = latent_field(&mut rng, opts);
        let forecast = latent.mapv(|z| z + forecast_noise.sample(&mut rng));
        let label = latent.mapv(|z| z + label_noise.sample(&mut rng));
        let cells = label.mapv(|y| y > opts.event_threshold);
        if cells.iter().any(|&c| c) {
            samples.push(GridSample {
                forecast,
                label,
                mask: GridMask::new(cells)?,
            });
        }
    }
    Ok(GridData { samples, draws })
}

/// Which per-cell inputs a grid model sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureSet {
    /// The forecast value at the cell.
    Weak,
    /// The cell value plus its 3×3 neighbourhood mean.
    #[default]
    Strong,
}

/// Feature vector for every cell in row-major order.
pub fn cell_features(forecast: &Array2<f64>, features: FeatureSet) -> Vec<Vec<f64>> {
    match features {
        FeatureSet::Weak => forecast.iter().map(|&v| vec![v]).collect(),
        FeatureSet::Strong => {
            let local = box_blur(forecast, 1);
            forecast.iter().zip(local.iter()).map(|(&v, &m)| vec![v, m]).collect()
        }
    }
}
