//! Classical reconstruction operators for `min_{f ∈ S} ½‖Hf − g‖² + λ Φ(f)`:
//!
//! - LS: `S = ℝⁿ`, `Φ = 0`, solved exactly with the pseudoinverse
//! - LS-NN: `S = ℝⁿ₊`, `Φ = 0`, solved by projected gradient descent
//! - PLS-TV: `S = ℝⁿ₊`, `Φ = TV`, solved by FISTA with a TV proximal step
//!
//! All iterative solvers assume `H` has been normalized to unit spectral norm,
//! so the gradient of the data term is 1-Lipschitz.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Sinogram};
use crate::linops::SvdFactors;
use crate::metrics;
use crate::projector::SystemMatrix;
use crate::vecops;

pub mod tv;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub step_size: f64,
    /// Stop once `‖f_k − f_{k−1}‖ / ‖f_{k−1}‖` drops below this.
    pub rel_change_tol: f64,
    pub max_iters: usize,
    pub tv_lambda: f64,
    pub tv_inner_iters: usize,
    /// Monotone FISTA: never accept a step that raises the objective.
    pub fista_monotone: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            step_size: 0.75,
            rel_change_tol: 1e-3,
            max_iters: 2000,
            tv_lambda: 0.0,
            tv_inner_iters: 20,
            fista_monotone: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size < 2.0) {
            return Err(Error::InvalidConfig(format!(
                "step size {} outside (0, 2)",
                self.step_size
            )));
        }
        if !(self.rel_change_tol > 0.0) {
            return Err(Error::InvalidConfig("rel_change_tol must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if !(self.tv_lambda >= 0.0) {
            return Err(Error::InvalidConfig("tv_lambda must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-iteration record of an iterative solve.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolveReport {
    pub iterations_run: usize,
    pub objective_trace: Vec<f64>,
    pub rel_change_trace: Vec<f64>,
    pub converged: bool,
}

impl SolveReport {
    fn record(&mut self, objective: f64, rel_change: f64) {
        self.iterations_run += 1;
        self.objective_trace.push(objective);
        self.rel_change_trace.push(rel_change);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,objective,relative_change\n");
        for (i, (obj, rel)) in self.objective_trace.iter().zip(&self.rel_change_trace).enumerate() {
            out.push_str(&format!("{},{:.10e},{:.10e}\n", i + 1, obj, rel));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Minimum-norm least-squares solution `H⁺g`.
pub fn solve_ls(factors: &SvdFactors, g: &Sinogram) -> Result<Image> {
    factors.pseudoinverse_apply(g)
}

fn check_problem(h: &SystemMatrix, g: &Sinogram) -> Result<()> {
    Error::check_len("sinogram values", h.rows(), g.len())
}

/// One unprojected gradient step `f − α·Hᵀ(Hf − g)` on `½‖Hf − g‖²`.
pub fn gradient_step(h: &SystemMatrix, g: &Sinogram, f: &Image, step: f64) -> Result<Image> {
    check_problem(h, g)?;
    Error::check_len("image pixels", h.cols(), f.len())?;
    let mut grad = vec![0.0; h.cols()];
    h.data_gradient(f.pixels(), g.values(), &mut grad);
    let pixels = f.pixels().iter().zip(&grad).map(|(x, d)| x - step * d).collect();
    Image::from_pixels(f.side(), pixels)
}

/// Elementwise `max(0, ·)`.
pub fn clamp_nonnegative(f: &Image) -> Image {
    f.map(|v| v.max(0.0))
}

/// Non-negative least squares by projected gradient descent from `init`:
/// `f ← max(0, f − α·Hᵀ(Hf − g))` until the relative change falls below the
/// tolerance or `max_iters` is reached.
pub fn solve_ls_nn(
    h: &SystemMatrix,
    g: &Sinogram,
    init: &Image,
    config: &SolverConfig,
) -> Result<(Image, SolveReport)> {
    config.validate()?;
    check_problem(h, g)?;
    Error::check_len("image pixels", h.cols(), init.len())?;

    let mut f = init.pixels().to_vec();
    let mut next = vec![0.0; f.len()];
    let mut grad = vec![0.0; f.len()];
    let mut report = SolveReport::default();
    for _ in 0..config.max_iters {
        h.data_gradient(&f, g.values(), &mut grad);
        for ((n, x), d) in next.iter_mut().zip(&f).zip(&grad) {
            *n = (x - config.step_size * d).max(0.0);
        }
        let rel = vecops::relative_change(&next, &f);
        std::mem::swap(&mut f, &mut next);
        report.record(h.data_objective(&f, g.values()), rel);
        if rel < config.rel_change_tol {
            report.converged = true;
            break;
        }
    }
    Ok((Image::from_pixels(init.side(), f)?, report))
}

/// `½‖Hf − g‖² + λ·TV(f)`
pub fn pls_tv_objective(h: &SystemMatrix, g: &Sinogram, f: &Image, lambda: f64) -> f64 {
    let data = h.data_objective(f.pixels(), g.values());
    if lambda == 0.0 {
        data
    } else {
        data + lambda * tv::tv_norm(f)
    }
}

/// TV-regularized non-negative least squares by FISTA from the all-zeros image.
///
/// Each proximal step applies the TV prox (warm-started dual iterations)
/// followed by clamping to the non-negative orthant. With
/// `SolverConfig::fista_monotone` a candidate that raises the objective is
/// rejected (the iterate is kept) while the momentum still uses it.
pub fn solve_pls_tv(h: &SystemMatrix, g: &Sinogram, config: &SolverConfig) -> Result<(Image, SolveReport)> {
    config.validate()?;
    check_problem(h, g)?;
    let side = h.side();
    let n = h.cols();
    let step = config.step_size;
    let lambda = config.tv_lambda;
    let mut prox = tv::TvProx::new(side, step * lambda, config.tv_inner_iters);

    let mut x = Image::zeros(side);
    let mut fx = pls_tv_objective(h, g, &x, lambda);
    let mut y = vec![0.0; n];
    let mut grad = vec![0.0; n];
    let mut t = 1.0_f64;
    let mut report = SolveReport::default();
    for _ in 0..config.max_iters {
        h.data_gradient(&y, g.values(), &mut grad);
        let w = Image::from_pixels(side, y.iter().zip(&grad).map(|(v, d)| v - step * d).collect())?;
        let z = clamp_nonnegative(&prox.apply(&w));
        let fz = pls_tv_objective(h, g, &z, lambda);
        let rel = vecops::relative_change(z.pixels(), x.pixels());

        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let accept = !config.fista_monotone || fz <= fx;
        let x_next = if accept { z.clone() } else { x.clone() };
        let (a, b) = (t / t_next, (t - 1.0) / t_next);
        for (k, yi) in y.iter_mut().enumerate() {
            let xn = x_next.pixels()[k];
            *yi = xn + a * (z.pixels()[k] - xn) + b * (xn - x.pixels()[k]);
        }
        if accept {
            fx = fz;
        }
        x = x_next;
        t = t_next;
        report.record(fx, rel);
        if rel < config.rel_change_tol {
            report.converged = true;
            break;
        }
    }
    Ok((x, report))
}

/// `count` values spaced logarithmically over `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..count)
                .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
                .collect()
        }
    }
}

/// Default regularization grid: 12 points from 1e-4 to 1e1.
pub fn default_lambda_grid() -> Vec<f64> {
    log_grid(1e-4, 1e1, 12)
}

#[derive(Clone, Debug)]
pub struct LambdaSweep {
    pub best_lambda: f64,
    pub best_image: Image,
    /// `(λ, RMSE)` for every grid point, in grid order.
    pub scores: Vec<(f64, f64)>,
}

/// Solves PLS-TV for each grid value and keeps the one closest to `truth` in
/// RMSE; ties go to the smaller `λ`.
pub fn sweep_lambda(
    h: &SystemMatrix,
    g: &Sinogram,
    truth: &Image,
    grid: &[f64],
    config: &SolverConfig,
) -> Result<LambdaSweep> {
    if grid.is_empty() {
        return Err(Error::Empty("lambda grid"));
    }
    let mut best: Option<(f64, f64, Image)> = None;
    let mut scores = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let cfg = SolverConfig {
            tv_lambda: lambda,
            ..config.clone()
        };
        let (image, _) = solve_pls_tv(h, g, &cfg)?;
        let score = metrics::rmse(&image, truth)?;
        scores.push((lambda, score));
        let better = match &best {
            None => true,
            Some((best_lambda, best_score, _)) => {
                score < *best_score || (score == *best_score && lambda < *best_lambda)
            }
        };
        if better {
            best = Some((lambda, score, image));
        }
    }
    let (best_lambda, _, best_image) = best.expect("grid is non-empty");
    Ok(LambdaSweep {
        best_lambda,
        best_image,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::DEFAULT_TRUNCATION;
    use crate::phantom::{generate_phantom, rasterize, PhantomConfig};
    use crate::projector::ScanGeometry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn operator(coverage: f64, detectors: usize, side: usize) -> SystemMatrix {
        SystemMatrix::build(&ScanGeometry::limited_view(coverage, detectors), side)
            .unwrap()
            .normalized()
    }

    fn truth(seed: u64, side: usize) -> Image {
        rasterize(&generate_phantom(seed, &PhantomConfig::default()).unwrap(), side).unwrap()
    }

    fn tight() -> SolverConfig {
        SolverConfig {
            rel_change_tol: 1e-12,
            max_iters: 200_000,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        for bad in [
            SolverConfig { step_size: 2.0, ..Default::default() },
            SolverConfig { step_size: 0.0, ..Default::default() },
            SolverConfig { rel_change_tol: 0.0, ..Default::default() },
            SolverConfig { tv_lambda: -1.0, ..Default::default() },
            SolverConfig { max_iters: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn ls_on_consistent_row_space_data_is_exact() {
        let h = operator(20.0, 12, 16);
        let factors = SvdFactors::compute(&h, DEFAULT_TRUNCATION).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g0 = Sinogram::from_values(20, 12, (0..240).map(|_| rng.random::<f64>()).collect()).unwrap();
        let f = h.apply_adjoint(&g0).unwrap();
        let g = h.apply(&f).unwrap();
        let ls = solve_ls(&factors, &g).unwrap();
        assert!(vecops::dist(ls.pixels(), f.pixels()) <= 1e-8 * vecops::norm(f.pixels()));
        let zero = solve_ls(&factors, &Sinogram::zeros(20, 12)).unwrap();
        assert!(zero.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ls_residual_beats_random_probes() {
        let h = operator(20.0, 12, 16);
        let factors = SvdFactors::compute(&h, DEFAULT_TRUNCATION).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Sinogram::from_values(20, 12, (0..240).map(|_| rng.random::<f64>()).collect()).unwrap();
        let ls = solve_ls(&factors, &g).unwrap();
        let best = h.data_objective(ls.pixels(), g.values());
        for _ in 0..100 {
            let x = Image::from_fn(16, |_, _| rng.random::<f64>() - 0.5);
            assert!(best <= h.data_objective(x.pixels(), g.values()) + 1e-12);
        }
    }

    #[test]
    fn nonnegativity_projects_one_dimensional_optimum() {
        // H = [1] on a single pixel of a 2×2 image; minimize ½(x + 1)²
        let geom = ScanGeometry {
            num_views: 1,
            angle_start: 0.0,
            angle_end: 1.0,
            num_detectors: 1,
            detector_spacing: 1.0,
        };
        let h = SystemMatrix::build(&geom, 2).unwrap().normalized();
        let g = Sinogram::from_values(1, 1, vec![-1.0]).unwrap();
        let init = Image::from_pixels(2, vec![0.5; 4]).unwrap();
        let (x, report) = solve_ls_nn(&h, &g, &init, &tight()).unwrap();
        assert!(report.converged);
        // the ray hits two pixels; both are driven to the bound
        assert_eq!(h.row(0).count(), 2);
        for (p, _) in h.row(0) {
            assert_eq!(x.pixels()[p], 0.0);
        }
    }

    #[test]
    fn ls_nn_recovers_nonnegative_row_space_object() {
        let h = operator(20.0, 12, 16);
        let factors = SvdFactors::compute(&h, DEFAULT_TRUNCATION).unwrap();
        let g0 = Sinogram::from_values(20, 12, vec![1.0; 240]).unwrap();
        let f = h.apply_adjoint(&g0).unwrap();
        assert!(f.min() >= 0.0);
        let g = h.apply(&f).unwrap();
        let (x, _) = solve_ls_nn(&h, &g, &Image::zeros(16), &tight()).unwrap();
        let _ = factors;
        assert!(vecops::dist(x.pixels(), f.pixels()) < 0.01 * vecops::norm(f.pixels()));
    }

    #[test]
    fn ls_nn_descends_monotonically_and_stays_nonnegative() {
        let h = operator(60.0, 16, 32);
        let f = truth(11, 32);
        let g = h.apply(&f).unwrap();
        let (x, report) = solve_ls_nn(&h, &g, &Image::zeros(32), &SolverConfig::default()).unwrap();
        assert!(x.min() >= 0.0);
        assert_eq!(report.objective_trace.len(), report.iterations_run);
        for w in report.objective_trace.windows(2) {
            assert!(w[1] <= w[0], "objective rose: {} -> {}", w[0], w[1]);
        }
        assert!(report.converged);
    }

    #[test]
    fn tv_with_zero_lambda_matches_ls_nn() {
        // overdetermined and full column rank, so the NNLS minimizer is unique
        let h = operator(60.0, 12, 8);
        let f = truth(2, 8);
        let g = h.apply(&f).unwrap();
        let (a, _) = solve_ls_nn(&h, &g, &Image::zeros(8), &tight()).unwrap();
        let cfg = SolverConfig { tv_lambda: 0.0, ..tight() };
        let (b, _) = solve_pls_tv(&h, &g, &cfg).unwrap();
        assert!(vecops::dist(a.pixels(), b.pixels()) <= 1e-3 * vecops::norm(a.pixels()));
    }

    #[test]
    fn huge_lambda_flattens_the_image() {
        let h = operator(60.0, 12, 8);
        let f = truth(3, 8);
        let g = h.apply(&f).unwrap();
        let cfg = SolverConfig {
            tv_lambda: 1e6,
            rel_change_tol: 1e-9,
            max_iters: 20_000,
            ..Default::default()
        };
        let (x, _) = solve_pls_tv(&h, &g, &cfg).unwrap();
        let mean = x.pixels().iter().sum::<f64>() / x.len() as f64;
        assert!(mean > 0.0);
        assert!(x.max() - x.min() < 1e-3 * mean, "spread {} mean {mean}", x.max() - x.min());
    }

    #[test]
    fn tv_lowers_total_variation_at_similar_residual() {
        let h = operator(60.0, 16, 32);
        let f = truth(7, 32);
        let g = h.apply(&f).unwrap();
        let (nn, _) = solve_ls_nn(&h, &g, &Image::zeros(32), &SolverConfig::default()).unwrap();
        let cfg = SolverConfig { tv_lambda: 1e-3, ..Default::default() };
        let (reg, report) = solve_pls_tv(&h, &g, &cfg).unwrap();
        assert!(tv::tv_norm(&reg) < tv::tv_norm(&nn));
        let r_nn = h.data_objective(nn.pixels(), g.values());
        let r_tv = h.data_objective(reg.pixels(), g.values());
        let g_energy = 0.5 * vecops::dot(g.values(), g.values());
        assert!(r_tv < 0.01 * g_energy && r_nn < 0.01 * g_energy);
        assert!(reg.min() >= 0.0);
        let start = pls_tv_objective(&h, &g, &Image::zeros(32), 1e-3);
        assert!(*report.objective_trace.last().unwrap() <= start);
        for w in report.objective_trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn sweep_picks_argmin() {
        let h = operator(60.0, 16, 16);
        let f = truth(8, 16);
        let mut g = h.apply(&f).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sigma = 0.02 * g.max();
        for v in g.values_mut() {
            *v += sigma * (rng.random::<f64>() - 0.5) * 3.46;
        }
        let cfg = SolverConfig::default();
        let one = sweep_lambda(&h, &g, &f, &[0.01], &cfg).unwrap();
        assert_eq!(one.best_lambda, 0.01);

        let two = sweep_lambda(&h, &g, &f, &[0.0, 1e6], &cfg).unwrap();
        assert_eq!(two.best_lambda, 0.0);

        let grid = log_grid(1e-4, 1e-1, 4);
        let many = sweep_lambda(&h, &g, &f, &grid, &cfg).unwrap();
        let best = metrics::rmse(&many.best_image, &f).unwrap();
        for &(_, score) in &many.scores {
            assert!(best <= score);
        }
        assert!(matches!(sweep_lambda(&h, &g, &f, &[], &cfg), Err(Error::Empty(_))));
    }

    #[test]
    fn log_grid_endpoints() {
        let grid = default_lambda_grid();
        assert_eq!(grid.len(), 12);
        assert!((grid[0] - 1e-4).abs() < 1e-16);
        assert!((grid[11] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn report_csv_has_one_row_per_iteration() {
        let h = operator(60.0, 16, 16);
        let g = h.apply(&truth(1, 16)).unwrap();
        let (_, report) = solve_ls_nn(&h, &g, &Image::zeros(16), &SolverConfig::default()).unwrap();
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), report.iterations_run + 1);
        assert!(csv.starts_with("iteration,objective,relative_change\n1,"));
    }
}
