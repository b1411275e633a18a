use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dlrecon::harness::{
    self, evaluate_case, load_network, make_split, prepare_case, report_csv, run_stage1, run_stage2, select_lambda,
    write_lambda_csv, AtStage, ExperimentConfig, Scenario, Split, Stage, StageResult,
};
use dlrecon::linops::cached_factors;
use dlrecon::neural::Network;
use dlrecon::projector::{ScanGeometry, SystemMatrix};
use dlrecon::recon::{self, ForwardModel};
use dlrecon::{solvers, Error, Sinogram};

#[derive(Parser)]
#[command(name = "dlrecon", version, about = "Limited-view CT reconstruction with a learned quasi-projection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test datasets for every configured case.
    GenData(Common),
    /// Train the network (stage 1, stage 2 or both).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = StageChoice::Both)]
        stage: StageChoice,
    },
    /// Reconstruct one sinogram file.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Raw sinogram (`.f32` with JSON sidecar).
        #[arg(long)]
        sinogram: PathBuf,
        /// Weight file stem (`<stem>.json` + `<stem>.f32`).
        #[arg(long)]
        weights: PathBuf,
        /// Output image path (raw `.f32`; a `.pgm` preview is written next to it).
        #[arg(long)]
        out: PathBuf,
        /// Outer iterations; 1 gives the single-pass result.
        #[arg(long)]
        n: Option<usize>,
        /// Data is in physical units and must be rescaled to the
        /// normalized operator.
        #[arg(long)]
        physical: bool,
        /// Scenario whose `R` operator to use.
        #[arg(long, value_enum, default_value_t = ScenarioArg::InverseCrime)]
        scenario: ScenarioArg,
    },
    /// Evaluate the configured methods on the test split with stored weights.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Which stored network to use.
        #[arg(long, default_value_t = 2)]
        weights_stage: u8,
    },
    /// PLS-TV regularization sweep (validation split, or per test image with
    /// `--oracle-lambda`).
    SweepLambda(Common),
    /// Data generation, training, evaluation and reports in one go.
    RunAll(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum StageChoice {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    InverseCrime,
    ModelError,
    ModelErrorNoise,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::InverseCrime => Scenario::InverseCrime,
            ScenarioArg::ModelError => Scenario::ModelError,
            ScenarioArg::ModelErrorNoise => Scenario::ModelErrorNoise,
        }
    }
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment configuration; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: config value, then $DLRECON_ROOT, then ./experiment).
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    detectors: Option<usize>,
    /// Angular ranges in degrees, comma separated.
    #[arg(long, value_delimiter = ',')]
    angles: Option<Vec<f64>>,
    #[arg(long, value_enum, value_delimiter = ',')]
    scenarios: Option<Vec<ScenarioArg>>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    val_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    /// Training iterations per stage.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_outer: Option<usize>,
    /// Select λ per test image against its truth.
    #[arg(long)]
    oracle_lambda: bool,
}

impl Common {
    fn resolve(&self) -> StageResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).at(Stage::Config)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.output {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.side {
            cfg.side = v;
        }
        if let Some(v) = self.detectors {
            cfg.num_detectors = v;
        }
        if let Some(v) = &self.angles {
            cfg.angular_ranges = v.clone();
        }
        if let Some(v) = &self.scenarios {
            cfg.scenarios = v.iter().map(|&s| s.into()).collect();
        }
        if let Some(v) = self.train_size {
            cfg.train_size = v;
        }
        if let Some(v) = self.val_size {
            cfg.val_size = v;
        }
        if let Some(v) = self.test_size {
            cfg.test_size = v;
        }
        if let Some(v) = self.iterations {
            cfg.train.iterations = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.n_outer {
            cfg.recon.n_outer = v;
        }
        cfg.oracle_lambda |= self.oracle_lambda;
        cfg.validate().at(Stage::Config)?;
        fs::create_dir_all(&cfg.output_dir).map_err(Error::from).at(Stage::Config)?;
        Ok(cfg)
    }
}

fn gen_data(cfg: &ExperimentConfig) -> StageResult<()> {
    for case in cfg.cases() {
        let ctx = prepare_case(cfg, &case)?;
        for split in Split::ALL {
            let ds = make_split(cfg, &ctx, split)?;
            println!("{} {}: {} images", case.label(), split.name(), ds.len());
        }
    }
    Ok(())
}

fn train(cfg: &ExperimentConfig, stage: StageChoice) -> StageResult<()> {
    for case in cfg.cases() {
        let ctx = prepare_case(cfg, &case)?;
        let data = make_split(cfg, &ctx, Split::Train)?;
        if matches!(stage, StageChoice::One | StageChoice::Both) {
            run_stage1(cfg, &ctx, &data)?;
            println!("{}: stage 1 weights in {}", case.label(), harness::weight_stem(&ctx, 1).display());
        }
        if matches!(stage, StageChoice::Two | StageChoice::Both) {
            let stage1 = load_network(&ctx, 1).at(Stage::TrainStage2)?;
            run_stage2(cfg, &ctx, &data, &stage1)?;
            println!("{}: stage 2 weights in {}", case.label(), harness::weight_stem(&ctx, 2).display());
        }
    }
    Ok(())
}

fn evaluate(cfg: &ExperimentConfig, weights_stage: u8) -> StageResult<()> {
    let needs_net = cfg.methods.iter().any(|m| m.needs_network());
    let mut reports = Vec::new();
    for case in cfg.cases() {
        let ctx = prepare_case(cfg, &case)?;
        let test = make_split(cfg, &ctx, Split::Test)?;
        let val = if cfg.val_size > 0 { Some(make_split(cfg, &ctx, Split::Val)?) } else { None };
        let net = if needs_net { Some(load_network(&ctx, weights_stage).at(Stage::Evaluate)?) } else { None };
        reports.push(evaluate_case(cfg, &ctx, &test, val.as_ref(), net.as_ref())?);
    }
    let csv = report_csv(&reports);
    fs::write(cfg.output_dir.join("report.csv"), &csv).map_err(Error::from).at(Stage::Report)?;
    print!("{csv}");
    Ok(())
}

fn sweep_lambda(cfg: &ExperimentConfig) -> StageResult<()> {
    for case in cfg.cases() {
        let ctx = prepare_case(cfg, &case)?;
        if cfg.oracle_lambda {
            let test = make_split(cfg, &ctx, Split::Test)?;
            let mut out = String::from("index,seed,lambda,rmse\n");
            for (i, item) in test.items.iter().enumerate() {
                let sweep = solvers::sweep_lambda(&ctx.h, item.measured(), &item.truth, &cfg.lambda_grid, &cfg.solver)
                    .at(Stage::Evaluate)?;
                let best = sweep.scores.iter().find(|(l, _)| *l == sweep.best_lambda).map_or(f64::NAN, |s| s.1);
                out.push_str(&format!("{i},{},{:.6e},{best:.8}\n", item.seed(), sweep.best_lambda));
            }
            let path = ctx.dir.join("lambda_oracle.csv");
            fs::write(&path, out).map_err(Error::from).at(Stage::Report)?;
            println!("{}: per-image λ in {}", case.label(), path.display());
        } else {
            let val = make_split(cfg, &ctx, Split::Val)?;
            let (best, scores) = select_lambda(&ctx.h, &val, &cfg.lambda_grid, &cfg.solver).at(Stage::Evaluate)?;
            write_lambda_csv(&ctx.dir.join("lambda_sweep.csv"), &scores).at(Stage::Report)?;
            println!("{}: λ = {best:.6e}", case.label());
        }
    }
    Ok(())
}

struct ReconstructArgs<'a> {
    sinogram: &'a Path,
    weights: &'a Path,
    out: &'a Path,
    n: Option<usize>,
    physical: bool,
    scenario: Scenario,
}

fn reconstruct(cfg: &ExperimentConfig, args: ReconstructArgs) -> StageResult<()> {
    let (g, geometry) = Sinogram::read_raw(args.sinogram).at(Stage::Data)?;
    let geometry = match geometry {
        Some(geom) => geom,
        None => ScanGeometry::limited_view(cfg.angular_ranges[0], cfg.num_detectors),
    };
    let h = SystemMatrix::build(&geometry, cfg.side).at(Stage::Operator)?.normalized();
    let g = if args.physical { h.normalize_data(&g) } else { g };
    let mut recon_cfg = cfg.recon.clone();
    recon_cfg.solver = cfg.solver.clone();
    recon_cfg.r_operator = args.scenario.r_operator();
    if let Some(n) = args.n {
        recon_cfg.n_outer = n;
    }
    let factors = match recon_cfg.r_operator {
        recon::ROperator::LsPseudoinverse => {
            Some(cached_factors(&h, cfg.svd_truncation, &cfg.cache_dir()).at(Stage::Operator)?)
        }
        recon::ROperator::LsNnPgd => None,
    };
    let (net, _) = Network::load(args.weights).at(Stage::Evaluate)?;
    let model = ForwardModel::new(&h, factors.as_ref());
    let (image, _) = recon::reconstruct(&g, &model, &net, &recon_cfg, None).at(Stage::Evaluate)?;
    if let Some(dir) = args.out.parent() {
        fs::create_dir_all(dir).map_err(Error::from).at(Stage::Report)?;
    }
    image.write_raw(args.out).at(Stage::Report)?;
    image.write_pgm(&args.out.with_extension("pgm")).at(Stage::Report)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn run(cli: Cli) -> StageResult<()> {
    match cli.command {
        Command::GenData(common) => gen_data(&common.resolve()?),
        Command::Train { common, stage } => train(&common.resolve()?, stage),
        Command::Evaluate { common, weights_stage } => evaluate(&common.resolve()?, weights_stage),
        Command::SweepLambda(common) => sweep_lambda(&common.resolve()?),
        Command::RunAll(common) => {
            let cfg = common.resolve()?;
            let reports = harness::run_experiment(&cfg)?;
            print!("{}", report_csv(&reports));
            if reports.iter().any(|r| r.methods.iter().any(|m| m.failure.is_some())) {
                eprintln!("some methods failed; see report.csv");
            }
            Ok(())
        }
        Command::Reconstruct {
            common,
            sinogram,
            weights,
            out,
            n,
            physical,
            scenario,
        } => {
            let cfg = common.resolve()?;
            reconstruct(
                &cfg,
                ReconstructArgs {
                    sinogram: &sinogram,
                    weights: &weights,
                    out: &out,
                    n,
                    physical,
                    scenario: scenario.into(),
                },
            )
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
