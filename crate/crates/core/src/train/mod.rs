//! Training with learning-rate decay and early stopping, accuracy
//! evaluation, subject-wise cross-validation and the last-MLP weight
//! analysis.

mod analysis;
mod config;
mod cv;
mod data;
mod fit;

pub use analysis::{analyze_last_mlp, last_mlp_product, WeightAnalysis};
pub use config::TrainConfig;
pub use cv::{run_cv, run_cv_with, run_seed, weighted_overall, CellResult, CvOptions, ExperimentReport, FoldResult};
pub use data::{clip_key, make_batch, pair_offset, window, Cropping, FeatureStore, PairBatch};
pub use fit::{
    accuracy_from_probs, evaluate_accuracy, fit_loop, mean_loss, predict, train_model, EarlyStopper, EpochRecord,
    TrainOutcome,
};
