//! Experiment plumbing: configuration, seeded datasets for each scenario,
//! two-stage training, test-set evaluation and report files.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! config.json  report.csv  trace_fig1.csv
//! <range>deg_<scenario>/
//!     data/{train,val,test}/   phantoms.jsonl, truth.f32, clean.f32, noisy.f32
//!     weights/stage{1,2}.{json,f32}
//!     images/<method>/NNNN.{f32,pgm}
//!     per_image.csv  trace_fig1.csv  trace_mean.csv  lambda_sweep.csv
//!     loss_stage{1,2}.csv
//! ```

mod config;
mod dataset;
mod experiment;

pub use config::{Case, ExperimentConfig, Method, Scenario, Split, ROOT_ENV};
pub use dataset::{add_noise, generate_dataset, DataItem, Dataset};
pub use experiment::{
    evaluate_case, load_network, make_split, prepare_case, report_csv, run_experiment, run_stage1, run_stage2,
    select_lambda, weight_stem, write_lambda_csv, AtStage, CaseContext, CaseReport, ImageScore, MethodSummary, Stage,
    StageError, StageResult, TraceMean,
};
