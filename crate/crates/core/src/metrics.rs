//! Image-quality metrics: RMSE, SSIM and the measurable / null-space split
//! of the RMSE.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::linops::SpaceProjectors;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub rmse: f64,
    pub ssim: f64,
    pub rmse_meas: f64,
    pub rmse_null: f64,
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    Error::check_len("image pixels", a.len(), b.len())
}

/// `√(mean((a − b)²))`
pub fn rmse(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let sum: f64 = a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sum / a.len() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range `L`. `None` uses the joint range of both inputs, which
    /// keeps the metric symmetric.
    pub data_range: Option<f64>,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: None,
        }
    }
}

impl SsimParams {
    /// Defaults with `L = max(truth) − min(truth)`.
    pub fn for_truth(truth: &Image) -> Self {
        Self {
            data_range: Some(truth.max() - truth.min()),
            ..Self::default()
        }
    }
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" filtering of an `n × n` image by `k ⊗ k`.
fn filter_valid(x: &[f64], n: usize, k: &[f64]) -> Vec<f64> {
    let w = k.len();
    let m = n + 1 - w;
    let mut rows = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            rows[i * m + j] = (0..w).map(|t| k[t] * x[i * n + j + t]).sum();
        }
    }
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            out[i * m + j] = (0..w).map(|t| k[t] * rows[(i + t) * m + j]).sum();
        }
    }
    out
}

/// Mean structural similarity over all fully contained Gaussian windows.
pub fn ssim(a: &Image, b: &Image, params: &SsimParams) -> Result<f64> {
    check_same(a, b)?;
    let n = a.side();
    if params.window == 0 || n < params.window {
        return Err(Error::InvalidConfig(format!(
            "image side {n} smaller than SSIM window {}",
            params.window
        )));
    }
    let range = params
        .data_range
        .unwrap_or_else(|| a.max().max(b.max()) - a.min().min(b.min()));
    let range = if range > 0.0 { range } else { 1.0 };
    let c1 = (params.k1 * range).powi(2);
    let c2 = (params.k2 * range).powi(2);

    let k = gaussian_kernel(params.window, params.sigma);
    let (x, y) = (a.pixels(), b.pixels());
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_x = filter_valid(x, n, &k);
    let mu_y = filter_valid(y, n, &k);
    let xx = filter_valid(&prod(x, x), n, &k);
    let yy = filter_valid(&prod(y, y), n, &k);
    let xy = filter_valid(&prod(x, y), n, &k);

    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = xx[i] - mx * mx;
        let vy = yy[i] - my * my;
        let cov = xy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / mu_x.len() as f64)
}

/// RMSE, SSIM (range taken from `truth`) and the RMSE of the measurable and
/// null-space components.
pub fn decomposed_rmse(estimate: &Image, truth: &Image, projectors: &SpaceProjectors) -> Result<EvalResult> {
    check_same(estimate, truth)?;
    let diff = Image::from_pixels(
        truth.side(),
        estimate.pixels().iter().zip(truth.pixels()).map(|(e, t)| e - t).collect(),
    )?;
    let (meas, null) = projectors.split(&diff)?;
    let zero = Image::zeros(truth.side());
    Ok(EvalResult {
        rmse: rmse(estimate, truth)?,
        ssim: ssim(estimate, truth, &SsimParams::for_truth(truth))?,
        rmse_meas: rmse(&meas, &zero)?,
        rmse_null: rmse(&null, &zero)?,
    })
}
