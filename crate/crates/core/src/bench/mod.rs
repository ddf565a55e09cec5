//! Experiment configuration, the MSE metric, report tables and the
//! orchestration of data generation, training and evaluation.

mod config;
mod experiment;
mod metrics;
mod report;

pub use config::{
    seed_override, ApbmSpec, BenchmarkSpec, DataPaths, ExperimentConfig, LinearBenchmark, LorenzBenchmark, MethodSpec,
    SplitSizes, SuiteConfig, SEED_ENV,
};
pub use experiment::{evaluate_method, generate_split, run_experiment, run_suite, score, train_method, Splits};
pub use metrics::{mean_std, mse_db, to_db, MetricReport, DB_FLOOR};
pub use report::{report_render, ReportFormat};
