//! Synthetic data and Monte Carlo checks of the calibration guarantee.

pub mod cp;
pub mod data;
pub mod experiment;
pub mod tasks;

pub use cp::{cp_equivalence_check, cp_equivalence_sweep, CpSweep};
pub use data::{
    box_blur, cell_features, gen_classification, gen_grid_fields, ClassificationData, FeatureSet, GridData,
    GridFieldOptions, GridSample,
};
pub use experiment::{
    default_ladder, exceedance_tolerance, run_guarantee_experiment, run_sweep, trial_rng, BandScenario,
    ExperimentOutcome, GridScenario, Method, Scenario, SweepEntry, TrialRecord, TrialReport,
};
pub use tasks::{
    predict_prob_grid, predict_triple_grid, BandTask, ClassificationTask, ClassificationTaskOptions, GridTaskOptions,
    SegmentationTask, TaskKind,
};
