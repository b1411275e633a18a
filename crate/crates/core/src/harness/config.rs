use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{NetworkSpec, TrainConfig};
use crate::phantom::PhantomConfig;
use crate::recon::{ROperator, ReconConfig};
use crate::solvers::{self, SolverConfig};

/// Environment variable naming the default experiment root directory.
pub const ROOT_ENV: &str = "DLRECON_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Data simulated with the reconstruction operator itself.
    InverseCrime,
    /// Analytic line integrals of the continuous phantom.
    ModelError,
    /// Analytic line integrals plus Gaussian noise.
    ModelErrorNoise,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::InverseCrime => "inverse_crime",
            Scenario::ModelError => "model_error",
            Scenario::ModelErrorNoise => "model_error_noise",
        }
    }

    /// LS for consistent data, LS-NN otherwise.
    pub fn r_operator(self) -> ROperator {
        match self {
            Scenario::InverseCrime => ROperator::LsPseudoinverse,
            _ => ROperator::LsNnPgd,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Offset added to the base seed; keeps the splits' phantom seeds
    /// disjoint for any split size below a million.
    pub fn seed_offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1_000_000,
            Split::Test => 2_000_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// LS or LS-NN, whichever the scenario's `R` is; this is `R(0)`.
    Baseline,
    PlsTv,
    SinglePass,
    Proposed,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Baseline, Method::PlsTv, Method::SinglePass, Method::Proposed];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::PlsTv => "pls-tv",
            Method::SinglePass => "single-pass",
            Method::Proposed => "proposed",
        }
    }

    pub fn needs_network(self) -> bool {
        matches!(self, Method::SinglePass | Method::Proposed)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One scenario at one angular range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Case {
    pub scenario: Scenario,
    pub angular_range: f64,
}

impl Case {
    /// Directory and report label, e.g. `60deg_inverse_crime`.
    pub fn label(&self) -> String {
        format!("{}deg_{}", self.angular_range, self.scenario)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scenarios: Vec<Scenario>,
    /// Degrees of angular coverage; every scenario runs at every range.
    pub angular_ranges: Vec<f64>,
    pub side: usize,
    pub num_detectors: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Noise σ as a fraction of `max(g)`; only used by `model_error_noise`.
    pub noise_fraction: f64,
    pub seed: u64,
    pub noise_seed: u64,
    pub net_seed: u64,
    pub phantom: PhantomConfig,
    pub solver: SolverConfig,
    pub recon: ReconConfig,
    pub network: NetworkSpec,
    /// Used for both training stages.
    pub train: TrainConfig,
    pub lambda_grid: Vec<f64>,
    /// Pick λ per test image against its truth instead of on the
    /// validation split.
    pub oracle_lambda: bool,
    pub methods: Vec<Method>,
    pub svd_truncation: f64,
    /// Test image whose per-iteration trace is written out.
    pub trace_image: usize,
    pub dump_images: bool,
    /// Defaults to `<output_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let output_dir = std::env::var_os(ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("experiment"));
        Self {
            scenarios: vec![Scenario::InverseCrime],
            angular_ranges: vec![60.0],
            side: 64,
            num_detectors: 64,
            train_size: 500,
            val_size: 100,
            test_size: 100,
            noise_fraction: 0.02,
            seed: 0,
            noise_seed: 0x5eed,
            net_seed: 0,
            phantom: PhantomConfig::default(),
            solver: SolverConfig::default(),
            recon: ReconConfig::default(),
            network: NetworkSpec::default(),
            train: TrainConfig {
                iterations: 20_000,
                ..TrainConfig::default()
            },
            lambda_grid: solvers::default_lambda_grid(),
            oracle_lambda: false,
            methods: Method::ALL.to_vec(),
            svd_truncation: crate::linops::DEFAULT_TRUNCATION,
            trace_image: 0,
            dump_images: true,
            cache_dir: None,
            output_dir,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.scenarios.is_empty() || self.angular_ranges.is_empty() {
            return bad("need at least one scenario and one angular range".into());
        }
        if let Some(a) = self.angular_ranges.iter().find(|a| !(**a > 0.0 && **a <= 360.0)) {
            return bad(format!("angular range {a} outside (0, 360]"));
        }
        if self.side < 11 {
            return bad(format!("side {} is below the 11-pixel SSIM window", self.side));
        }
        if self.num_detectors == 0 {
            return bad("num_detectors must be positive".into());
        }
        if self.train_size == 0 || self.test_size == 0 {
            return bad("train and test splits must be non-empty".into());
        }
        if self.methods.contains(&Method::PlsTv) && !self.oracle_lambda && self.val_size == 0 {
            return bad("PLS-TV with validation λ selection needs a validation split".into());
        }
        if self.methods.contains(&Method::PlsTv) && self.lambda_grid.is_empty() {
            return bad("empty λ grid".into());
        }
        if !(self.noise_fraction >= 0.0) {
            return bad("noise_fraction must be non-negative".into());
        }
        if self.trace_image >= self.test_size {
            return bad(format!("trace_image {} outside the test split", self.trace_image));
        }
        self.phantom.validate()?;
        self.solver.validate()?;
        self.recon.validate()?;
        self.network.validate()?;
        self.train.validate()
    }

    pub fn cases(&self) -> Vec<Case> {
        let mut out = Vec::new();
        for &angular_range in &self.angular_ranges {
            for &scenario in &self.scenarios {
                out.push(Case {
                    scenario,
                    angular_range,
                });
            }
        }
        out
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_size,
            Split::Val => self.val_size,
            Split::Test => self.test_size,
        }
    }

    /// Noise fraction actually applied in `scenario`.
    pub fn effective_noise(&self, scenario: Scenario) -> f64 {
        if scenario == Scenario::ModelErrorNoise {
            self.noise_fraction
        } else {
            0.0
        }
    }

    /// Reconstruction settings for `case`, with the scenario's `R` and the
    /// experiment's solver settings.
    pub fn recon_for(&self, case: &Case) -> ReconConfig {
        ReconConfig {
            r_operator: case.scenario.r_operator(),
            solver: self.solver.clone(),
            ..self.recon.clone()
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("cache"))
    }

    pub fn case_dir(&self, case: &Case) -> PathBuf {
        self.output_dir.join(case.label())
    }

    /// A tiny configuration for smoke runs: 20 images, side 16.
    pub fn micro(output_dir: PathBuf) -> Self {
        Self {
            side: 16,
            num_detectors: 8,
            train_size: 10,
            val_size: 5,
            test_size: 5,
            network: NetworkSpec::new(3, 4),
            train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 4,
                iterations: 20,
                seed: 0,
            },
            recon: ReconConfig {
                n_collect: 3,
                ..ReconConfig::default()
            },
            solver: SolverConfig {
                max_iters: 200,
                ..SolverConfig::default()
            },
            lambda_grid: solvers::log_grid(1e-3, 1e-1, 3),
            output_dir,
            ..Self::default()
        }
    }
}
