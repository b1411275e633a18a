//! Alternating reconstruction: starting from `f_Q⁽⁰⁾ = 0`, repeat
//! `f_R⁽ᵏ⁾ = R(f_Q⁽ᵏ⁻¹⁾)` then `f_Q⁽ᵏ⁾ = Q(f_R⁽ᵏ⁾)` for `n_outer` rounds.
//!
//! `R` enforces data fidelity, `Q` is the learned network. With `n_outer = 1`
//! this is plain post-processing of `R(0)`; with a clamp for `Q` and a single
//! gradient step for `R` it is projected gradient descent.
//!
//! Also holds the two training stages for `Q`: stage 1 on `R(0)` inputs,
//! stage 2 on the intermediate images produced by the loop itself.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Sinogram};
use crate::linops::{SpaceProjectors, SvdFactors};
use crate::metrics;
use crate::neural::{self, Network, NetworkSpec, TrainConfig, TrainReport};
use crate::projector::SystemMatrix;
use crate::solvers::{self, SolveReport, SolverConfig};
use crate::vecops;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ROperator {
    /// `H⁺g + P_null(f)`: the least-squares solution keeping the warm
    /// start's null-space component.
    LsPseudoinverse,
    /// Non-negative least squares by projected gradient descent from `f`.
    LsNnPgd,
}

/// Which loop images become stage-2 training inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Inputs {
    /// `f_R⁽ᵏ⁾`, the images `Q` is applied to.
    Reconstructed,
    /// `f_Q⁽ᵏ⁾`, the network outputs.
    Projected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconConfig {
    pub n_outer: usize,
    pub r_operator: ROperator,
    pub solver: SolverConfig,
    /// Loop length used when collecting stage-2 inputs.
    pub n_collect: usize,
    pub stage2_inputs: Stage2Inputs,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            n_outer: 5,
            r_operator: ROperator::LsPseudoinverse,
            solver: SolverConfig::default(),
            n_collect: 10,
            stage2_inputs: Stage2Inputs::Reconstructed,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_outer == 0 {
            return Err(Error::InvalidConfig("n_outer must be at least 1".into()));
        }
        if self.n_collect == 0 {
            return Err(Error::InvalidConfig("n_collect must be at least 1".into()));
        }
        self.solver.validate()
    }
}

/// The data-fidelity operator `R(f_warm)`.
pub trait Reconstructor {
    fn reconstruct(&self, warm: &Image) -> Result<(Image, Option<SolveReport>)>;
}

/// The image-domain operator `Q`.
pub trait QuasiProjector {
    fn project(&self, f: &Image) -> Image;
}

impl QuasiProjector for Network {
    fn project(&self, f: &Image) -> Image {
        self.forward(f)
    }
}

/// `Q = max(0, ·)`.
pub struct ClampQ;

impl QuasiProjector for ClampQ {
    fn project(&self, f: &Image) -> Image {
        solvers::clamp_nonnegative(f)
    }
}

pub struct IdentityQ;

impl QuasiProjector for IdentityQ {
    fn project(&self, f: &Image) -> Image {
        f.clone()
    }
}

pub struct PseudoinverseR<'a> {
    factors: &'a SvdFactors,
    ls: Image,
}

impl<'a> PseudoinverseR<'a> {
    pub fn new(factors: &'a SvdFactors, g: &Sinogram) -> Result<Self> {
        Ok(Self {
            factors,
            ls: solvers::solve_ls(factors, g)?,
        })
    }
}

impl Reconstructor for PseudoinverseR<'_> {
    fn reconstruct(&self, warm: &Image) -> Result<(Image, Option<SolveReport>)> {
        let null = self.factors.projectors().null(warm)?;
        let pixels = self.ls.pixels().iter().zip(null.pixels()).map(|(a, b)| a + b).collect();
        Ok((Image::from_pixels(self.ls.side(), pixels)?, None))
    }
}

pub struct PgdR<'a> {
    pub h: &'a SystemMatrix,
    pub g: &'a Sinogram,
    pub config: &'a SolverConfig,
}

impl Reconstructor for PgdR<'_> {
    fn reconstruct(&self, warm: &Image) -> Result<(Image, Option<SolveReport>)> {
        let (f, report) = solvers::solve_ls_nn(self.h, self.g, warm, self.config)?;
        Ok((f, Some(report)))
    }
}

/// A single unprojected gradient step on `½‖Hf − g‖²`.
pub struct GradientStepR<'a> {
    pub h: &'a SystemMatrix,
    pub g: &'a Sinogram,
    pub step: f64,
}

impl Reconstructor for GradientStepR<'_> {
    fn reconstruct(&self, warm: &Image) -> Result<(Image, Option<SolveReport>)> {
        Ok((solvers::gradient_step(self.h, self.g, warm, self.step)?, None))
    }
}

/// The system matrix and, when available, its SVD.
#[derive(Clone, Copy)]
pub struct ForwardModel<'a> {
    pub h: &'a SystemMatrix,
    pub factors: Option<&'a SvdFactors>,
}

impl<'a> ForwardModel<'a> {
    pub fn new(h: &'a SystemMatrix, factors: Option<&'a SvdFactors>) -> Self {
        Self { h, factors }
    }

    pub fn projectors(&self) -> Option<SpaceProjectors<'a>> {
        self.factors.map(SvdFactors::projectors)
    }

    /// The `R` operator selected by `config` for data `g`.
    pub fn r_operator<'b>(
        &'b self,
        g: &'b Sinogram,
        config: &'b ReconConfig,
    ) -> Result<Box<dyn Reconstructor + 'b>> {
        Error::check_len("sinogram values", self.h.rows(), g.len())?;
        Ok(match config.r_operator {
            ROperator::LsPseudoinverse => {
                let factors = self
                    .factors
                    .ok_or_else(|| Error::InvalidConfig("pseudoinverse R needs SVD factors".into()))?;
                Box::new(PseudoinverseR::new(factors, g)?)
            }
            ROperator::LsNnPgd => Box::new(PgdR {
                h: self.h,
                g,
                config: &config.solver,
            }),
        })
    }
}

/// RMSE of the measurable and null-space parts of `estimate − truth`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitError {
    pub meas: f64,
    pub null: f64,
}

#[derive(Clone, Debug)]
pub struct TraceEntry {
    /// 1-based outer iteration.
    pub k: usize,
    pub f_r: Image,
    pub f_q: Image,
    pub error_r: Option<SplitError>,
    pub error_q: Option<SplitError>,
    /// Iterations and convergence of an iterative `R`, if any.
    pub r_iterations: Option<usize>,
    pub r_converged: Option<bool>,
}

#[derive(Clone, Debug, Default)]
pub struct IterationTrace {
    pub entries: Vec<TraceEntry>,
}

impl IterationTrace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `k,rmse_meas_R,rmse_meas_Q,rmse_null_Q`; missing values are empty.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.10e}")).unwrap_or_default();
        let mut out = String::from("k,rmse_meas_R,rmse_meas_Q,rmse_null_Q\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.k,
                fmt(e.error_r.map(|s| s.meas)),
                fmt(e.error_q.map(|s| s.meas)),
                fmt(e.error_q.map(|s| s.null)),
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Writes `f_R_<k>` and `f_Q_<k>` as raw floats and PGM into `dir`.
    pub fn write_images(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for e in &self.entries {
            for (name, img) in [("f_R", &e.f_r), ("f_Q", &e.f_q)] {
                img.write_raw(&dir.join(format!("{name}_{}.f32", e.k)))?;
                img.write_pgm(&dir.join(format!("{name}_{}.pgm", e.k)))?;
            }
        }
        Ok(())
    }
}

fn split_error(projectors: &SpaceProjectors, estimate: &Image, truth: &Image) -> Result<SplitError> {
    let diff: Vec<f64> = estimate.pixels().iter().zip(truth.pixels()).map(|(a, b)| a - b).collect();
    let (meas, null) = projectors.split(&Image::from_pixels(truth.side(), diff)?)?;
    let n = (truth.len() as f64).sqrt();
    Ok(SplitError {
        meas: vecops::norm(meas.pixels()) / n,
        null: vecops::norm(null.pixels()) / n,
    })
}

/// Runs `n_outer` rounds of `f_R = R(f_Q)`, `f_Q = Q(f_R)` from
/// `f_Q = 0` and returns the last `f_Q`.
pub fn alternate<R, Q>(
    r: &R,
    q: &Q,
    side: usize,
    n_outer: usize,
    projectors: Option<&SpaceProjectors>,
    truth: Option<&Image>,
) -> Result<(Image, IterationTrace)>
where
    R: Reconstructor + ?Sized,
    Q: QuasiProjector + ?Sized,
{
    if n_outer == 0 {
        return Err(Error::InvalidConfig("n_outer must be at least 1".into()));
    }
    if let Some(t) = truth {
        Error::check_len("truth pixels", side * side, t.len())?;
    }
    let mut f_q = Image::zeros(side);
    let mut trace = IterationTrace::default();
    for k in 1..=n_outer {
        let (f_r, report) = r.reconstruct(&f_q)?;
        f_q = q.project(&f_r);
        let (error_r, error_q) = match (projectors, truth) {
            (Some(p), Some(t)) => (Some(split_error(p, &f_r, t)?), Some(split_error(p, &f_q, t)?)),
            _ => (None, None),
        };
        trace.entries.push(TraceEntry {
            k,
            f_r,
            f_q: f_q.clone(),
            error_r,
            error_q,
            r_iterations: report.as_ref().map(|r| r.iterations_run),
            r_converged: report.as_ref().map(|r| r.converged),
        });
    }
    Ok((f_q, trace))
}

/// The alternating reconstruction of `g` with the configured `R` and the
/// given `Q`. Errors against `truth` are traced when both `truth` and SVD
/// factors are available.
pub fn reconstruct<Q: QuasiProjector + ?Sized>(
    g: &Sinogram,
    model: &ForwardModel,
    q: &Q,
    config: &ReconConfig,
    truth: Option<&Image>,
) -> Result<(Image, IterationTrace)> {
    config.validate()?;
    let r = model.r_operator(g, config)?;
    let projectors = model.projectors();
    alternate(r.as_ref(), q, model.h.side(), config.n_outer, projectors.as_ref(), truth)
}

/// `Q(R(0))`.
pub fn single_pass<Q: QuasiProjector + ?Sized>(
    g: &Sinogram,
    model: &ForwardModel,
    q: &Q,
    config: &ReconConfig,
) -> Result<Image> {
    config.validate()?;
    let r = model.r_operator(g, config)?;
    let (f_r, _) = r.reconstruct(&Image::zeros(model.h.side()))?;
    Ok(q.project(&f_r))
}

/// A training example: ground truth and its measured data.
#[derive(Clone, Debug)]
pub struct Sample {
    pub truth: Image,
    pub data: Sinogram,
}

/// Stage-1 pairs `(R(0; g_i), f_i)`.
pub fn stage1_pairs(samples: &[Sample], model: &ForwardModel, config: &ReconConfig) -> Result<Vec<(Image, Image)>> {
    config.validate()?;
    let zero = Image::zeros(model.h.side());
    samples
        .iter()
        .map(|s| {
            let (f_r, _) = model.r_operator(&s.data, config)?.reconstruct(&zero)?;
            Ok((f_r, s.truth.clone()))
        })
        .collect()
}

/// Stage-2 pairs: every intermediate image of an `n_collect`-round loop
/// run with the frozen `net`, paired with its truth. Ordered image-major.
pub fn stage2_pairs(
    net: &Network,
    samples: &[Sample],
    model: &ForwardModel,
    config: &ReconConfig,
) -> Result<Vec<(Image, Image)>> {
    config.validate()?;
    let mut pairs = Vec::with_capacity(samples.len() * config.n_collect);
    for s in samples {
        let r = model.r_operator(&s.data, config)?;
        let (_, trace) = alternate(r.as_ref(), net, model.h.side(), config.n_collect, None, None)?;
        for e in trace.entries {
            let input = match config.stage2_inputs {
                Stage2Inputs::Reconstructed => e.f_r,
                Stage2Inputs::Projected => e.f_q,
            };
            pairs.push((input, s.truth.clone()));
        }
    }
    Ok(pairs)
}

/// Initializes a network from `net_seed` and trains it on stage-1 pairs.
pub fn train_stage1(
    samples: &[Sample],
    model: &ForwardModel,
    spec: &NetworkSpec,
    net_seed: u64,
    recon: &ReconConfig,
    train: &TrainConfig,
) -> Result<(Network, TrainReport)> {
    if samples.is_empty() {
        return Err(Error::Empty("stage-1 training set"));
    }
    let pairs = stage1_pairs(samples, model, recon)?;
    let mut net = neural::init_network(spec, net_seed)?;
    let report = neural::train(&mut net, &pairs, train)?;
    Ok((net, report))
}

/// Fine-tunes a copy of the stage-1 network on stage-2 pairs collected with
/// the stage-1 weights. ADAM moments start from zero.
pub fn train_stage2(
    stage1: &Network,
    samples: &[Sample],
    model: &ForwardModel,
    recon: &ReconConfig,
    train: &TrainConfig,
) -> Result<(Network, TrainReport)> {
    if samples.is_empty() {
        return Err(Error::Empty("stage-2 training set"));
    }
    let pairs = stage2_pairs(stage1, samples, model, recon)?;
    let mut net = stage1.clone();
    net.reset_optimizer();
    let report = neural::train(&mut net, &pairs, train)?;
    Ok((net, report))
}

/// Mean RMSE of the loop output over `samples`.
pub fn mean_rmse<Q: QuasiProjector + ?Sized>(
    samples: &[Sample],
    model: &ForwardModel,
    q: &Q,
    config: &ReconConfig,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut total = 0.0;
    for s in samples {
        let (f, _) = reconstruct(&s.data, model, q, config, None)?;
        total += metrics::rmse(&f, &s.truth)?;
    }
    Ok(total / samples.len() as f64)
}
