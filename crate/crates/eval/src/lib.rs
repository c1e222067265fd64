//! Baselines, evaluation measures and the Monte-Carlo experiment runner.

pub mod baselines;
pub mod experiment;
pub mod metrics;
pub mod report;

pub use baselines::{fit_ca_dml, fit_ia_dml, fit_sr, fit_sr_from_stats, SrFit, SufficientStats};
pub use experiment::{
    run_experiment, run_experiment_with, ExperimentConfig, Method, ReducerChoice, Scenario,
};
pub use metrics::{
    ate, rmse_cate, rmse_coef, sig_consistency_cate, sig_consistency_coef, welch_flag,
    welch_t_test, Flag,
};
pub use report::{EvalReport, Metric};
