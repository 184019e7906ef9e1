//! Conformal loss-controlling prediction.
//!
//! Given a nested family of prediction sets `C_λ` and a loss that never
//! increases as the set grows, [`clcp_search`] picks the smallest λ on a grid
//! such that the loss of a new exchangeable sample exceeds `alpha` with
//! probability at most `delta`.
//!
//! ```
//! use clcp::{clcp_search, ControlConfig, LambdaGrid, LossMatrix};
//!
//! let grid = LambdaGrid::new(vec![0.0, 0.5, 1.0]).unwrap();
//! let rows = vec![vec![1.0, 0.2, 0.0], vec![1.0, 0.0, 0.0], vec![0.6, 0.1, 0.0]];
//! let matrix = LossMatrix::from_rows(&rows, grid, 1.0).unwrap();
//! let result = clcp_search(&matrix, &ControlConfig::new(0.2, 0.3).unwrap()).unwrap();
//! assert_eq!(result.lambda_star, 0.5);
//! ```

pub mod calibrate;
pub mod error;
pub mod io;
pub mod losses;
pub mod models;
pub mod predictors;
pub mod simulate;
pub mod types;
pub mod validate;

pub use calibrate::{
    augmented_quantile_oracle, check_feasibility, clcp_search, conformal_quantile, crc_search, icp_quantile,
    quantile_rank, two_step_search, Augmentation, ConformalQuantileSpec, Feasibility, TwoStepResult,
};
pub use error::{Error, Result};
pub use losses::{
    band_miscoverage_rate, class_varying_loss, compute_loss_matrix, fnr_loss, miscoverage_loss, BandMiscoverage,
    BandMissProfile, ClassLossTable, ClassVarying, FalseNegativeRate, Miscoverage, SetLoss, UNIT_BOUND,
};
pub use models::{
    pinball_loss, pinball_subgradient, train_quantile_regressor, train_softmax, QuantileModel, SoftmaxModel,
    TrainOptions, TrainingTrace,
};
pub use predictors::{
    band_from_quantiles, grid_segmentation_set, nonconformity_label_set, threshold_label_set, BandForecast, BandScale,
    NestedSet, NonconformityLabelSets, QuantileBands, SegmentationSets, SetPredictor, ThresholdLabelSets,
};
pub use types::{
    Band, CalibrationResult, ClassProbs, ControlConfig, GridMask, LabelSet, LambdaGrid, LossMatrix, ProbGrid,
    QuantileTripleGrid,
};
pub use validate::{
    check_nesting, check_set_sequence, validate_loss_matrix, NestingReport, ValidationReport, Violation,
};
