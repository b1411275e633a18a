use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::{Case, ExperimentConfig, Method, Split};
use super::dataset::{generate_dataset, Dataset};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::linops::{cached_factors, SvdFactors};
use crate::metrics::{self, EvalResult};
use crate::neural::{Network, TrainReport};
use crate::projector::{ScanGeometry, SystemMatrix};
use crate::recon::{self, ForwardModel, ReconConfig};
use crate::solvers::{self, SolverConfig};
use crate::vecops;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Config,
    Operator,
    Data,
    TrainStage1,
    TrainStage2,
    Evaluate,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Operator => "operator",
            Stage::Data => "data",
            Stage::TrainStage1 => "train-stage1",
            Stage::TrainStage2 => "train-stage2",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("[{stage}] {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

pub type StageResult<T> = std::result::Result<T, StageError>;

pub trait AtStage<T> {
    fn at(self, stage: Stage) -> StageResult<T>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> StageResult<T> {
        self.map_err(|source| StageError { stage, source })
    }
}

/// System matrix and SVD for one case.
pub struct CaseContext {
    pub case: Case,
    pub h: SystemMatrix,
    pub factors: SvdFactors,
    pub dir: PathBuf,
}

impl CaseContext {
    pub fn model(&self) -> ForwardModel<'_> {
        ForwardModel::new(&self.h, Some(&self.factors))
    }
}

pub fn prepare_case(config: &ExperimentConfig, case: &Case) -> StageResult<CaseContext> {
    let geometry = ScanGeometry::limited_view(case.angular_range, config.num_detectors);
    let h = SystemMatrix::build(&geometry, config.side).at(Stage::Operator)?.normalized();
    let factors = cached_factors(&h, config.svd_truncation, &config.cache_dir()).at(Stage::Operator)?;
    Ok(CaseContext {
        case: *case,
        h,
        factors,
        dir: config.case_dir(case),
    })
}

fn data_dir(ctx: &CaseContext, split: Split) -> PathBuf {
    ctx.dir.join("data").join(split.name())
}

/// Generates one split and writes it under `<case>/data/<split>`.
pub fn make_split(config: &ExperimentConfig, ctx: &CaseContext, split: Split) -> StageResult<Dataset> {
    let ds = generate_dataset(config, &ctx.case, &ctx.h, split).at(Stage::Data)?;
    ds.save(&data_dir(ctx, split)).at(Stage::Data)?;
    Ok(ds)
}

pub fn weight_stem(ctx: &CaseContext, stage: u8) -> PathBuf {
    ctx.dir.join("weights").join(format!("stage{stage}"))
}

fn write_loss_csv(path: &Path, report: &TrainReport) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (i, l) in report.loss_trace.iter().enumerate() {
        out.push_str(&format!("{},{:.10e}\n", i + 1, l));
    }
    fs::write(path, out)?;
    Ok(())
}

fn training_metadata(config: &ExperimentConfig, ctx: &CaseContext, stage: u8, samples: usize) -> serde_json::Value {
    serde_json::json!({
        "stage": stage,
        "case": ctx.case.label(),
        "train_images": samples,
        "train": config.train,
        "recon": config.recon_for(&ctx.case),
    })
}

/// Stage-1 training from scratch; weights saved to `weights/stage1`.
pub fn run_stage1(config: &ExperimentConfig, ctx: &CaseContext, train: &Dataset) -> StageResult<Network> {
    let samples = train.samples();
    let recon = config.recon_for(&ctx.case);
    let (net, report) =
        recon::train_stage1(&samples, &ctx.model(), &config.network, config.net_seed, &recon, &config.train)
            .at(Stage::TrainStage1)?;
    save_network(ctx, &net, 1, training_metadata(config, ctx, 1, samples.len()), &report).at(Stage::TrainStage1)?;
    Ok(net)
}

/// Stage-2 fine-tuning of `stage1`; weights saved to `weights/stage2`.
pub fn run_stage2(config: &ExperimentConfig, ctx: &CaseContext, train: &Dataset, stage1: &Network) -> StageResult<Network> {
    let samples = train.samples();
    let recon = config.recon_for(&ctx.case);
    let (net, report) =
        recon::train_stage2(stage1, &samples, &ctx.model(), &recon, &config.train).at(Stage::TrainStage2)?;
    let meta = training_metadata(config, ctx, 2, samples.len() * recon.n_collect);
    save_network(ctx, &net, 2, meta, &report).at(Stage::TrainStage2)?;
    Ok(net)
}

fn save_network(ctx: &CaseContext, net: &Network, stage: u8, meta: serde_json::Value, report: &TrainReport) -> Result<()> {
    let stem = weight_stem(ctx, stage);
    fs::create_dir_all(stem.parent().expect("stem has a parent"))?;
    net.save(&stem, meta)?;
    write_loss_csv(&ctx.dir.join(format!("loss_stage{stage}.csv")), report)
}

/// Weights as stored on disk (`f32` precision).
pub fn load_network(ctx: &CaseContext, stage: u8) -> Result<Network> {
    Ok(Network::load(&weight_stem(ctx, stage))?.0)
}

/// Mean validation RMSE of PLS-TV for each grid value; returns the best
/// value (ties to the smaller `λ`) and all scores.
pub fn select_lambda(
    h: &SystemMatrix,
    val: &Dataset,
    grid: &[f64],
    solver: &SolverConfig,
) -> Result<(f64, Vec<(f64, f64)>)> {
    if val.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    if grid.is_empty() {
        return Err(Error::Empty("lambda grid"));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let cfg = SolverConfig {
            tv_lambda: lambda,
            ..solver.clone()
        };
        let mut total = 0.0;
        for item in &val.items {
            let (f, _) = solvers::solve_pls_tv(h, item.measured(), &cfg)?;
            total += metrics::rmse(&f, &item.truth)?;
        }
        scores.push((lambda, total / val.len() as f64));
    }
    let best = scores
        .iter()
        .fold(None::<(f64, f64)>, |best, &(l, s)| match best {
            Some((bl, bs)) if bs < s || (bs == s && bl <= l) => Some((bl, bs)),
            _ => Some((l, s)),
        })
        .expect("grid is non-empty");
    Ok((best.0, scores))
}

pub fn write_lambda_csv(path: &Path, scores: &[(f64, f64)]) -> Result<()> {
    let mut out = String::from("lambda,mean_rmse\n");
    for (l, s) in scores {
        out.push_str(&format!("{l:.6e},{s:.8}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ImageScore {
    pub index: usize,
    pub seed: u64,
    pub eval: EvalResult,
    pub lambda: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct MethodSummary {
    pub method: Method,
    pub scenario: String,
    pub mean_rmse: f64,
    pub mean_ssim: f64,
    pub std_rmse: f64,
    pub std_ssim: f64,
    /// `None` when every image was evaluated.
    pub failure: Option<String>,
    pub per_image: Vec<ImageScore>,
}

/// Mean of the loop's per-iteration errors over the test split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceMean {
    pub k: usize,
    pub rmse_meas_r: f64,
    pub rmse_meas_q: f64,
    pub rmse_null_q: f64,
}

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub case: Case,
    pub methods: Vec<MethodSummary>,
    pub mean_trace: Vec<TraceMean>,
    /// Largest `‖P_meas(f_R⁽ᵏ⁾ − truth)‖ / ‖truth‖` over test images and
    /// iterations.
    pub max_meas_residual: Option<f64>,
    pub lambda: Option<f64>,
}

impl CaseReport {
    pub fn method(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }
}

/// Mean and sample standard deviation.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize(method: Method, scenario: &str, result: Result<Vec<ImageScore>>) -> MethodSummary {
    match result {
        Ok(per_image) => {
            let rmse: Vec<f64> = per_image.iter().map(|s| s.eval.rmse).collect();
            let ssim: Vec<f64> = per_image.iter().map(|s| s.eval.ssim).collect();
            let (mean_rmse, std_rmse) = mean_std(&rmse);
            let (mean_ssim, std_ssim) = mean_std(&ssim);
            MethodSummary {
                method,
                scenario: scenario.to_owned(),
                mean_rmse,
                mean_ssim,
                std_rmse,
                std_ssim,
                failure: None,
                per_image,
            }
        }
        Err(e) => MethodSummary {
            method,
            scenario: scenario.to_owned(),
            mean_rmse: f64::NAN,
            mean_ssim: f64::NAN,
            std_rmse: f64::NAN,
            std_ssim: f64::NAN,
            failure: Some(e.to_string()),
            per_image: Vec::new(),
        },
    }
}

fn dump(config: &ExperimentConfig, ctx: &CaseContext, what: &str, index: usize, img: &Image) -> Result<()> {
    if !config.dump_images {
        return Ok(());
    }
    let dir = ctx.dir.join("images").join(what);
    fs::create_dir_all(&dir)?;
    img.write_raw(&dir.join(format!("{index:04}.f32")))?;
    img.write_pgm(&dir.join(format!("{index:04}.pgm")))
}

/// Evaluates the configured methods on the test split. A method that fails
/// is reported with its error instead of aborting the others.
pub fn evaluate_case(
    config: &ExperimentConfig,
    ctx: &CaseContext,
    test: &Dataset,
    val: Option<&Dataset>,
    net: Option<&Network>,
) -> StageResult<CaseReport> {
    let label = ctx.case.label();
    let model = ctx.model();
    let projectors = ctx.factors.projectors();
    let recon_cfg = config.recon_for(&ctx.case);
    let zero = Image::zeros(config.side);
    let mut lambda = None;
    let mut mean_trace = Vec::new();
    let mut max_meas_residual = None;
    let mut methods = Vec::new();

    for idx in 0..test.len() {
        dump(config, ctx, "truth", idx, &test.items[idx].truth).at(Stage::Evaluate)?;
    }

    for &method in &config.methods {
        let result: Result<Vec<ImageScore>> = (|| {
            let mut scores = Vec::with_capacity(test.len());
            match method {
                Method::Baseline => {
                    for (idx, item) in test.items.iter().enumerate() {
                        let (f, _) = model.r_operator(item.measured(), &recon_cfg)?.reconstruct(&zero)?;
                        dump(config, ctx, method.name(), idx, &f)?;
                        scores.push(score(idx, item.seed(), &f, &item.truth, &projectors, None)?);
                    }
                }
                Method::PlsTv => {
                    let fixed = if config.oracle_lambda {
                        None
                    } else {
                        let val = val.ok_or(Error::Empty("validation split"))?;
                        let (best, grid_scores) = select_lambda(&ctx.h, val, &config.lambda_grid, &config.solver)?;
                        write_lambda_csv(&ctx.dir.join("lambda_sweep.csv"), &grid_scores)?;
                        lambda = Some(best);
                        Some(best)
                    };
                    for (idx, item) in test.items.iter().enumerate() {
                        let (f, l) = match fixed {
                            Some(l) => {
                                let cfg = SolverConfig {
                                    tv_lambda: l,
                                    ..config.solver.clone()
                                };
                                (solvers::solve_pls_tv(&ctx.h, item.measured(), &cfg)?.0, l)
                            }
                            None => {
                                let sweep = solvers::sweep_lambda(
                                    &ctx.h,
                                    item.measured(),
                                    &item.truth,
                                    &config.lambda_grid,
                                    &config.solver,
                                )?;
                                (sweep.best_image, sweep.best_lambda)
                            }
                        };
                        dump(config, ctx, method.name(), idx, &f)?;
                        scores.push(score(idx, item.seed(), &f, &item.truth, &projectors, Some(l))?);
                    }
                }
                Method::SinglePass => {
                    let net = net.ok_or(Error::Empty("trained network"))?;
                    let cfg = ReconConfig {
                        n_outer: 1,
                        ..recon_cfg.clone()
                    };
                    for (idx, item) in test.items.iter().enumerate() {
                        let (f, _) = recon::reconstruct(item.measured(), &model, net, &cfg, None)?;
                        dump(config, ctx, method.name(), idx, &f)?;
                        scores.push(score(idx, item.seed(), &f, &item.truth, &projectors, None)?);
                    }
                }
                Method::Proposed => {
                    let net = net.ok_or(Error::Empty("trained network"))?;
                    let n = recon_cfg.n_outer;
                    let mut sums = vec![[0.0; 3]; n];
                    let mut worst = 0.0_f64;
                    for (idx, item) in test.items.iter().enumerate() {
                        let (f, trace) = recon::reconstruct(item.measured(), &model, net, &recon_cfg, Some(&item.truth))?;
                        let truth_norm = vecops::norm(item.truth.pixels()).max(f64::MIN_POSITIVE);
                        let root_n = (item.truth.len() as f64).sqrt();
                        for (e, acc) in trace.entries.iter().zip(sums.iter_mut()) {
                            let (er, eq) = (e.error_r.expect("truth given"), e.error_q.expect("truth given"));
                            acc[0] += er.meas;
                            acc[1] += eq.meas;
                            acc[2] += eq.null;
                            worst = worst.max(er.meas * root_n / truth_norm);
                        }
                        if idx == config.trace_image {
                            trace.write_csv(&ctx.dir.join("trace_fig1.csv"))?;
                            if config.dump_images {
                                trace.write_images(&ctx.dir.join("trace"))?;
                            }
                        }
                        dump(config, ctx, method.name(), idx, &f)?;
                        scores.push(score(idx, item.seed(), &f, &item.truth, &projectors, None)?);
                    }
                    let count = test.len() as f64;
                    mean_trace = sums
                        .iter()
                        .enumerate()
                        .map(|(i, s)| TraceMean {
                            k: i + 1,
                            rmse_meas_r: s[0] / count,
                            rmse_meas_q: s[1] / count,
                            rmse_null_q: s[2] / count,
                        })
                        .collect();
                    max_meas_residual = Some(worst);
                }
            }
            Ok(scores)
        })();
        methods.push(summarize(method, &label, result));
    }

    let report = CaseReport {
        case: ctx.case,
        methods,
        mean_trace,
        max_meas_residual,
        lambda,
    };
    write_case_outputs(ctx, &report).at(Stage::Report)?;
    Ok(report)
}

fn score(
    index: usize,
    seed: u64,
    f: &Image,
    truth: &Image,
    projectors: &crate::linops::SpaceProjectors,
    lambda: Option<f64>,
) -> Result<ImageScore> {
    Ok(ImageScore {
        index,
        seed,
        eval: metrics::decomposed_rmse(f, truth, projectors)?,
        lambda,
    })
}

fn write_case_outputs(ctx: &CaseContext, report: &CaseReport) -> Result<()> {
    fs::create_dir_all(&ctx.dir)?;
    let mut out = String::from("method,index,seed,rmse,ssim,rmse_meas,rmse_null,lambda\n");
    for m in &report.methods {
        for s in &m.per_image {
            out.push_str(&format!(
                "{},{},{},{:.8},{:.8},{:.8},{:.8},{}\n",
                m.method,
                s.index,
                s.seed,
                s.eval.rmse,
                s.eval.ssim,
                s.eval.rmse_meas,
                s.eval.rmse_null,
                s.lambda.map(|l| format!("{l:.6e}")).unwrap_or_default()
            ));
        }
    }
    fs::write(ctx.dir.join("per_image.csv"), out)?;

    if !report.mean_trace.is_empty() {
        let mut out = String::from("k,rmse_meas_R,rmse_meas_Q,rmse_null_Q\n");
        for t in &report.mean_trace {
            out.push_str(&format!(
                "{},{:.10e},{:.10e},{:.10e}\n",
                t.k, t.rmse_meas_r, t.rmse_meas_q, t.rmse_null_q
            ));
        }
        fs::write(ctx.dir.join("trace_mean.csv"), out)?;
    }
    Ok(())
}

/// `method,scenario,mean_rmse,mean_ssim,std_rmse,std_ssim,status`.
pub fn report_csv(reports: &[CaseReport]) -> String {
    let mut out = String::from("method,scenario,mean_rmse,mean_ssim,std_rmse,std_ssim,status\n");
    for r in reports {
        for m in &r.methods {
            let status = match &m.failure {
                None => "ok".to_owned(),
                Some(e) => format!("failed: {}", e.replace([',', '\n'], ";")),
            };
            out.push_str(&format!(
                "{},{},{:.8},{:.8},{:.8},{:.8},{}\n",
                m.method, m.scenario, m.mean_rmse, m.mean_ssim, m.std_rmse, m.std_ssim, status
            ));
        }
    }
    out
}

const FAILED_MARKER: &str = "FAILED";

/// Data generation, two-stage training (when a network method is
/// configured) and test evaluation for every case, then `report.csv` and
/// `trace_fig1.csv` in the output directory. On error a `FAILED` file with
/// the stage and message is left next to the partial outputs.
pub fn run_experiment(config: &ExperimentConfig) -> StageResult<Vec<CaseReport>> {
    let out = config.output_dir.clone();
    let result = run_all_cases(config);
    if let Err(e) = &result {
        let _ = fs::create_dir_all(&out);
        let _ = fs::write(out.join(FAILED_MARKER), format!("{e}\n"));
    }
    result
}

fn run_all_cases(config: &ExperimentConfig) -> StageResult<Vec<CaseReport>> {
    config.validate().at(Stage::Config)?;
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(Error::from).at(Stage::Config)?;
    let _ = fs::remove_file(out.join(FAILED_MARKER));
    config.save(&out.join("config.json")).at(Stage::Config)?;

    let needs_net = config.methods.iter().any(|m| m.needs_network());
    let mut reports = Vec::new();
    for case in config.cases() {
        let ctx = prepare_case(config, &case)?;
        let test = make_split(config, &ctx, Split::Test)?;
        let val = if config.val_size > 0 {
            Some(make_split(config, &ctx, Split::Val)?)
        } else {
            None
        };
        let net = if needs_net {
            let train = make_split(config, &ctx, Split::Train)?;
            let stage1 = run_stage1(config, &ctx, &train)?;
            // fine-tune from the stored stage-1 weights so every result is
            // reproducible from the files on disk
            drop(stage1);
            let stage1 = load_network(&ctx, 1).at(Stage::TrainStage1)?;
            run_stage2(config, &ctx, &train, &stage1)?;
            Some(load_network(&ctx, 2).at(Stage::TrainStage2)?)
        } else {
            None
        };
        reports.push(evaluate_case(config, &ctx, &test, val.as_ref(), net.as_ref())?);
    }

    fs::write(out.join("report.csv"), report_csv(&reports)).map_err(Error::from).at(Stage::Report)?;
    if let Some(first) = reports.first() {
        let src = config.case_dir(&first.case).join("trace_fig1.csv");
        if src.exists() {
            fs::copy(&src, out.join("trace_fig1.csv")).map_err(Error::from).at(Stage::Report)?;
        }
    }
    Ok(reports)
}
