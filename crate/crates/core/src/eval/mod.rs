//! Evaluation: correlations, n-way identification, bootstrap intervals,
//! reports and the ablation ladder.

mod ablation;
mod metrics;
mod report;

pub use ablation::{
    fold_members, reconstruct_test, run_ablation, train_configuration, Comparison, LadderReport, RunConfig, Rung,
};
pub use metrics::{
    bootstrap_ci, constant_input_warnings, correlation_matrix, identification_accuracy, identify_nway, pearson,
    sign_test, voxel_correlations, Identification, Protocol,
};
pub use report::{Aggregate, EvalConfig, EvalReport, ImageRecord};
