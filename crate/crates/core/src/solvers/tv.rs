//! Isotropic total variation with forward differences and Neumann boundary,
//! and its proximal operator via Chambolle's dual projection iteration.

use crate::image::Image;

/// Forward differences `(∂x, ∂y)`; the last column / row difference is zero.
pub fn gradient(image: &Image) -> (Vec<f64>, Vec<f64>) {
    let n = image.side();
    let u = image.pixels();
    let mut gx = vec![0.0; n * n];
    let mut gy = vec![0.0; n * n];
    gradient_into(u, n, &mut gx, &mut gy);
    (gx, gy)
}

fn gradient_into(u: &[f64], n: usize, gx: &mut [f64], gy: &mut [f64]) {
    for i in 0..n {
        for j in 0..n {
            let k = i * n + j;
            gx[k] = if j + 1 < n { u[k + 1] - u[k] } else { 0.0 };
            gy[k] = if i + 1 < n { u[k + n] - u[k] } else { 0.0 };
        }
    }
}

/// Discrete divergence, the negative adjoint of [`gradient`].
pub fn divergence(px: &[f64], py: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    divergence_into(px, py, n, &mut out);
    out
}

fn divergence_into(px: &[f64], py: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..n {
        for j in 0..n {
            let k = i * n + j;
            let dx = match j {
                0 => px[k],
                _ if j + 1 == n => -px[k - 1],
                _ => px[k] - px[k - 1],
            };
            let dy = match i {
                0 => py[k],
                _ if i + 1 == n => -py[k - n],
                _ => py[k] - py[k - n],
            };
            out[k] = dx + dy;
        }
    }
}

/// `Σ √(∂x² + ∂y²)`
pub fn tv_norm(image: &Image) -> f64 {
    let (gx, gy) = gradient(image);
    gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).sum()
}

const DUAL_STEP: f64 = 0.125;

/// Approximate `argmin_u ½‖u − z‖² + μ·TV(u)`.
///
/// Keeps the dual field between calls so repeated applications (one per
/// outer FISTA step) start from the previous solution.
#[derive(Clone, Debug)]
pub struct TvProx {
    side: usize,
    weight: f64,
    inner_iters: usize,
    px: Vec<f64>,
    py: Vec<f64>,
}

impl TvProx {
    pub fn new(side: usize, weight: f64, inner_iters: usize) -> Self {
        Self {
            side,
            weight,
            inner_iters,
            px: vec![0.0; side * side],
            py: vec![0.0; side * side],
        }
    }

    pub fn apply(&mut self, z: &Image) -> Image {
        assert_eq!(z.side(), self.side, "prox image side");
        if self.weight == 0.0 || self.inner_iters == 0 {
            return z.clone();
        }
        let n = self.side;
        let mu = self.weight;
        let zs = z.pixels();
        let mut div = vec![0.0; n * n];
        let mut w = vec![0.0; n * n];
        let mut gx = vec![0.0; n * n];
        let mut gy = vec![0.0; n * n];
        for _ in 0..self.inner_iters {
            divergence_into(&self.px, &self.py, n, &mut div);
            for ((wk, d), zk) in w.iter_mut().zip(&div).zip(zs) {
                *wk = d - zk / mu;
            }
            gradient_into(&w, n, &mut gx, &mut gy);
            for k in 0..n * n {
                let denom = 1.0 + DUAL_STEP * gx[k].hypot(gy[k]);
                self.px[k] = (self.px[k] + DUAL_STEP * gx[k]) / denom;
                self.py[k] = (self.py[k] + DUAL_STEP * gy[k]) / denom;
            }
        }
        divergence_into(&self.px, &self.py, n, &mut div);
        let pixels = zs.iter().zip(&div).map(|(zk, d)| zk - mu * d).collect();
        Image::from_pixels(n, pixels).expect("side checked above")
    }
}
