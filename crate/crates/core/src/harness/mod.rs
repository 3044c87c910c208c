//! Experiment harness: configuration, run directories, baselines,
//! metrics, sweeps and the CLI.

pub mod baselines;
pub mod cli;
pub mod config;
pub mod experiments;
pub mod metrics;
pub mod pipeline;

pub use baselines::{baseline_order, rank_baseline_users, run_baseline, BaselineKind};
pub use cli::cli_main;
pub use config::Config;
pub use experiments::{rq1_sweep, rq3_depth_sweep, Rq1Row, Rq3Row};
pub use metrics::{eval_ranking, MetricsReport};
pub use pipeline::{Pipeline, Prepared};
