//! Parallel-beam scan geometry and the discrete forward operator `H`.
//!
//! A ray is the line `{p : p·(cos θ, sin θ) = s}` where `θ` is the view
//! angle and `s` the signed detector coordinate. Entry `(r, p)` of the system
//! matrix is the length of ray `r` inside pixel `p`, computed by walking the
//! ray across the pixel grid (Siddon-style traversal).

use std::f64::consts::SQRT_2;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Sinogram};
use crate::vecops;

/// Default cap on the memory used by a sparse system matrix (2 GiB).
pub const DEFAULT_MATRIX_BUDGET: usize = 2 << 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanGeometry {
    pub num_views: usize,
    /// Degrees. Views are `angle_start + k·(angle_end − angle_start)/num_views`.
    pub angle_start: f64,
    pub angle_end: f64,
    pub num_detectors: usize,
    /// Detector pitch in object units; the array is centered on the rotation axis.
    pub detector_spacing: f64,
}

impl ScanGeometry {
    /// One view per degree over `coverage` degrees starting at 0°, with a
    /// detector array exactly spanning the diagonal of the `[-1, 1]²` object.
    pub fn limited_view(coverage: f64, num_detectors: usize) -> Self {
        Self::arc(0.0, coverage, num_detectors)
    }

    pub fn arc(angle_start: f64, coverage: f64, num_detectors: usize) -> Self {
        Self {
            num_views: coverage.round().max(1.0) as usize,
            angle_start,
            angle_end: angle_start + coverage,
            num_detectors,
            detector_spacing: 2.0 * SQRT_2 / num_detectors.max(1) as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_views == 0 || self.num_detectors == 0 {
            return Err(Error::InvalidConfig(
                "geometry needs at least one view and one detector".into(),
            ));
        }
        if !(self.angle_end > self.angle_start) {
            return Err(Error::InvalidConfig(format!(
                "angular range [{}, {}) is empty",
                self.angle_start, self.angle_end
            )));
        }
        if !(self.detector_spacing > 0.0 && self.detector_spacing.is_finite()) {
            return Err(Error::InvalidConfig("detector spacing must be positive".into()));
        }
        Ok(())
    }

    pub fn coverage(&self) -> f64 {
        self.angle_end - self.angle_start
    }

    pub fn angles_deg(&self) -> Vec<f64> {
        let step = self.coverage() / self.num_views as f64;
        (0..self.num_views)
            .map(|k| self.angle_start + k as f64 * step)
            .collect()
    }

    pub fn angles_rad(&self) -> Vec<f64> {
        self.angles_deg().into_iter().map(f64::to_radians).collect()
    }

    pub fn detector_positions(&self) -> Vec<f64> {
        let mid = (self.num_detectors as f64 - 1.0) / 2.0;
        (0..self.num_detectors)
            .map(|k| (k as f64 - mid) * self.detector_spacing)
            .collect()
    }

    pub fn num_rays(&self) -> usize {
        self.num_views * self.num_detectors
    }
}

const PARALLEL_EPS: f64 = 1e-12;

/// Pixel/length pairs for one ray crossing a `side × side` grid over `[-1, 1]²`.
pub fn trace_ray(theta: f64, s: f64, side: usize) -> Vec<(usize, f64)> {
    let (sin, cos) = theta.sin_cos();
    let (px, py) = (s * cos, s * sin);
    let (dx, dy) = (-sin, cos);

    let mut t_min = f64::NEG_INFINITY;
    let mut t_max = f64::INFINITY;
    for (p, d) in [(px, dx), (py, dy)] {
        if d.abs() > PARALLEL_EPS {
            let (a, b) = ((-1.0 - p) / d, (1.0 - p) / d);
            t_min = t_min.max(a.min(b));
            t_max = t_max.min(a.max(b));
        } else if p.abs() >= 1.0 {
            return Vec::new();
        }
    }
    if !(t_max > t_min) {
        return Vec::new();
    }

    let w = 2.0 / side as f64;
    let mut ts = Vec::with_capacity(2 * side + 2);
    ts.push(t_min);
    ts.push(t_max);
    for (p, d) in [(px, dx), (py, dy)] {
        if d.abs() <= PARALLEL_EPS {
            continue;
        }
        for k in 1..side {
            let t = (-1.0 + k as f64 * w - p) / d;
            if t > t_min && t < t_max {
                ts.push(t);
            }
        }
    }
    ts.sort_by(f64::total_cmp);

    let last = side as isize - 1;
    let mut hits = Vec::with_capacity(ts.len());
    for pair in ts.windows(2) {
        let len = pair[1] - pair[0];
        if len <= 1e-14 {
            continue;
        }
        let tm = 0.5 * (pair[0] + pair[1]);
        let (x, y) = (px + tm * dx, py + tm * dy);
        let col = (((x + 1.0) / w).floor() as isize).clamp(0, last) as usize;
        let row = ((((1.0 - y) / w).floor()) as isize).clamp(0, last) as usize;
        hits.push((row * side + col, len));
    }
    hits
}

/// Sparse ray-by-pixel matrix in compressed-row form.
#[derive(Clone, Debug)]
pub struct SystemMatrix {
    geometry: ScanGeometry,
    side: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
    /// Raw (unnormalized) matrix = `scale` × stored matrix.
    scale: f64,
    norm_estimate: f64,
}

impl SystemMatrix {
    pub fn build(geometry: &ScanGeometry, side: usize) -> Result<Self> {
        Self::build_with_budget(geometry, side, DEFAULT_MATRIX_BUDGET)
    }

    pub fn build_with_budget(geometry: &ScanGeometry, side: usize, budget: usize) -> Result<Self> {
        geometry.validate()?;
        if side < 2 {
            return Err(Error::InvalidConfig(format!("image side {side} < 2")));
        }
        // each ray crosses at most 2·side pixels; 12 bytes per stored entry
        let required = geometry.num_rays() * (2 * side) * 12;
        if required > budget {
            return Err(Error::MemoryBudget {
                what: "system matrix",
                required,
                budget,
            });
        }

        let mut row_ptr = Vec::with_capacity(geometry.num_rays() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        let positions = geometry.detector_positions();
        for theta in geometry.angles_rad() {
            for &s in &positions {
                for (pixel, len) in trace_ray(theta, s, side) {
                    col_idx.push(pixel as u32);
                    values.push(len);
                }
                row_ptr.push(col_idx.len());
            }
        }
        let mut matrix = Self {
            geometry: geometry.clone(),
            side,
            row_ptr,
            col_idx,
            values,
            scale: 1.0,
            norm_estimate: 0.0,
        };
        matrix.norm_estimate = matrix.power_iteration(500, 1e-12);
        Ok(matrix)
    }

    /// Rescales so the largest singular value (power-iteration estimate) is 1.
    /// Data must be rescaled with [`SystemMatrix::normalize_data`] to match.
    pub fn normalized(mut self) -> Self {
        let sigma = self.norm_estimate;
        if sigma > 0.0 {
            for v in &mut self.values {
                *v /= sigma;
            }
            self.scale *= sigma;
            self.norm_estimate = self.power_iteration(500, 1e-12);
        }
        self
    }

    /// Maps data measured with the raw operator onto this (possibly rescaled) one.
    pub fn normalize_data(&self, g: &Sinogram) -> Sinogram {
        g.scaled(1.0 / self.scale)
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geometry
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn cols(&self) -> usize {
        self.side * self.side
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Largest singular value, by power iteration on `HᵀH`.
    pub fn norm_estimate(&self) -> f64 {
        self.norm_estimate
    }

    /// `m < n`: fewer measurements than unknowns.
    pub fn is_underdetermined(&self) -> bool {
        self.rows() < self.cols()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[range.clone()]
            .iter()
            .zip(&self.values[range])
            .map(|(&c, &v)| (c as usize, v))
    }

    pub fn forward_into(&self, f: &[f64], g: &mut [f64]) {
        debug_assert_eq!(f.len(), self.cols());
        debug_assert_eq!(g.len(), self.rows());
        for (r, out) in g.iter_mut().enumerate() {
            let range = self.row_ptr[r]..self.row_ptr[r + 1];
            *out = self.col_idx[range.clone()]
                .iter()
                .zip(&self.values[range])
                .map(|(&c, &v)| v * f[c as usize])
                .sum();
        }
    }

    pub fn adjoint_into(&self, g: &[f64], f: &mut [f64]) {
        debug_assert_eq!(f.len(), self.cols());
        debug_assert_eq!(g.len(), self.rows());
        f.fill(0.0);
        for (r, &gr) in g.iter().enumerate() {
            if gr == 0.0 {
                continue;
            }
            let range = self.row_ptr[r]..self.row_ptr[r + 1];
            for (&c, &v) in self.col_idx[range.clone()].iter().zip(&self.values[range]) {
                f[c as usize] += v * gr;
            }
        }
    }

    pub fn apply(&self, f: &Image) -> Result<Sinogram> {
        Error::check_len("image pixels", self.cols(), f.len())?;
        let mut g = Sinogram::zeros(self.geometry.num_views, self.geometry.num_detectors);
        self.forward_into(f.pixels(), g.values_mut());
        Ok(g)
    }

    pub fn apply_adjoint(&self, g: &Sinogram) -> Result<Image> {
        Error::check_len("sinogram values", self.rows(), g.len())?;
        let mut f = Image::zeros(self.side);
        self.adjoint_into(g.values(), f.pixels_mut());
        Ok(f)
    }

    /// Gradient of `½‖Hf − g‖²`, i.e. `Hᵀ(Hf − g)`, plus the objective value.
    pub fn data_gradient(&self, f: &[f64], g: &[f64], grad: &mut [f64]) -> f64 {
        let mut residual = vec![0.0; self.rows()];
        self.forward_into(f, &mut residual);
        for (r, gi) in residual.iter_mut().zip(g) {
            *r -= gi;
        }
        self.adjoint_into(&residual, grad);
        0.5 * vecops::dot(&residual, &residual)
    }

    /// `½‖Hf − g‖²`
    pub fn data_objective(&self, f: &[f64], g: &[f64]) -> f64 {
        let mut residual = vec![0.0; self.rows()];
        self.forward_into(f, &mut residual);
        0.5 * residual
            .iter()
            .zip(g)
            .map(|(h, gi)| (h - gi) * (h - gi))
            .sum::<f64>()
    }

    fn power_iteration(&self, max_iters: usize, tol: f64) -> f64 {
        let n = self.cols();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.5).collect();
        let mut hv = vec![0.0; self.rows()];
        let mut w = vec![0.0; n];
        let mut sigma = 0.0;
        for _ in 0..max_iters {
            let nv = vecops::norm(&v);
            if nv == 0.0 {
                return 0.0;
            }
            v.iter_mut().for_each(|x| *x /= nv);
            self.forward_into(&v, &mut hv);
            let next = vecops::norm(&hv);
            self.adjoint_into(&hv, &mut w);
            std::mem::swap(&mut v, &mut w);
            if (next - sigma).abs() <= tol * next {
                return next;
            }
            sigma = next;
        }
        sigma
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut dense = nalgebra::DMatrix::zeros(self.rows(), self.cols());
        for r in 0..self.rows() {
            for (c, v) in self.row(r) {
                dense[(r, c)] += v;
            }
        }
        dense
    }

    /// Coordinate-format text dump (`row col value` per line) for debugging.
    pub fn write_coo(&self, path: &Path) -> Result<()> {
        let mut out = format!("# {} {} {}\n", self.rows(), self.cols(), self.nnz());
        for r in 0..self.rows() {
            for (c, v) in self.row(r) {
                out.push_str(&format!("{r} {c} {v:.17e}\n"));
            }
        }
        fs::File::create(path)?.write_all(out.as_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{analytic_sinogram, generate_phantom, rasterize, Ellipse, EllipsePhantom, PhantomConfig};

    /// Length of the line `{p·n = s}` inside an axis-aligned box, by slab clipping.
    fn clip_length(theta: f64, s: f64, x0: f64, x1: f64, y0: f64, y1: f64) -> f64 {
        let (sin, cos) = theta.sin_cos();
        let (px, py, dx, dy) = (s * cos, s * sin, -sin, cos);
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for (p, d, a, b) in [(px, dx, x0, x1), (py, dy, y0, y1)] {
            if d.abs() < 1e-12 {
                if p <= a || p >= b {
                    return 0.0;
                }
            } else {
                let (t0, t1) = ((a - p) / d, (b - p) / d);
                lo = lo.max(t0.min(t1));
                hi = hi.min(t0.max(t1));
            }
        }
        (hi - lo).max(0.0)
    }

    #[test]
    fn axis_aligned_rays_cross_every_pixel_once() {
        let geom = ScanGeometry {
            num_views: 1,
            angle_start: 0.0,
            angle_end: 1.0,
            num_detectors: 4,
            detector_spacing: 0.5,
        };
        let h = SystemMatrix::build(&geom, 4).unwrap();
        for r in 0..h.rows() {
            let row: Vec<_> = h.row(r).collect();
            assert_eq!(row.len(), 4);
            assert!(row.iter().all(|&(_, v)| (v - 0.5).abs() < 1e-15));
            // vertical ray through column r
            assert!(row.iter().all(|&(p, _)| p % 4 == r));
        }
    }

    #[test]
    fn missing_ray_gives_empty_row() {
        let geom = ScanGeometry {
            num_views: 1,
            angle_start: 0.0,
            angle_end: 1.0,
            num_detectors: 2,
            detector_spacing: 3.0,
        };
        let h = SystemMatrix::build(&geom, 8).unwrap();
        assert_eq!(h.nnz(), 0);
        assert_eq!(h.rows(), 2);
    }

    #[test]
    fn zero_image_projects_to_zero() {
        let h = SystemMatrix::build(&ScanGeometry::limited_view(60.0, 16), 16).unwrap();
        let g = h.apply(&Image::zeros(16)).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let h = SystemMatrix::build(&ScanGeometry::limited_view(10.0, 8), 8).unwrap();
        assert!(matches!(h.apply(&Image::zeros(9)), Err(Error::DimensionMismatch { .. })));
        assert!(h.apply_adjoint(&Sinogram::zeros(10, 9)).is_err());
    }

    #[test]
    fn memory_budget_is_enforced() {
        let geom = ScanGeometry::limited_view(60.0, 64);
        assert!(matches!(
            SystemMatrix::build_with_budget(&geom, 64, 1 << 20),
            Err(Error::MemoryBudget { .. })
        ));
    }

    #[test]
    fn view_angles_have_unit_spacing() {
        for coverage in [60.0, 100.0, 140.0] {
            let geom = ScanGeometry::limited_view(coverage, 64);
            let angles = geom.angles_deg();
            assert_eq!(angles.len(), coverage as usize);
            assert_eq!(geom.coverage(), coverage);
            for pair in angles.windows(2) {
                assert!((pair[1] - pair[0] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn desk_scale_60_degrees_is_underdetermined() {
        let h = SystemMatrix::build(&ScanGeometry::limited_view(60.0, 64), 64).unwrap();
        assert!(h.is_underdetermined());
        assert!(h.values.iter().all(|&v| v >= 0.0));
        for r in 0..h.rows() {
            assert!(h.row(r).count() <= 2 * 64);
        }
    }

    #[test]
    fn pixel_columns_match_independent_clipping() {
        let side = 12;
        let geom = ScanGeometry::limited_view(37.0, 17);
        let h = SystemMatrix::build(&geom, side).unwrap();
        let w = 2.0 / side as f64;
        let angles = geom.angles_rad();
        let positions = geom.detector_positions();
        for pixel in [0, 5, 40, 77, 143] {
            let mut indicator = Image::zeros(side);
            indicator.pixels_mut()[pixel] = 1.0;
            let column = h.apply(&indicator).unwrap();
            let (row, col) = (pixel / side, pixel % side);
            let x0 = -1.0 + col as f64 * w;
            let y1 = 1.0 - row as f64 * w;
            for (v, &theta) in angles.iter().enumerate() {
                for (d, &s) in positions.iter().enumerate() {
                    let expect = clip_length(theta, s, x0, x0 + w, y1 - w, y1);
                    let got = column.get(v, d);
                    assert!((got - expect).abs() < 1e-12, "pixel {pixel} view {v} det {d}: {got} vs {expect}");
                }
            }
        }
    }

    #[test]
    fn adjoint_dot_product_identity() {
        let h = SystemMatrix::build(&ScanGeometry::limited_view(60.0, 24), 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let f = Image::from_fn(20, |_, _| rng.random::<f64>() - 0.5);
            let g = Sinogram::from_values(60, 24, (0..60 * 24).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap();
            let lhs = vecops::dot(h.apply(&f).unwrap().values(), g.values());
            let rhs = vecops::dot(f.pixels(), h.apply_adjoint(&g).unwrap().pixels());
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()));
        }
    }

    #[test]
    fn forward_projection_matches_analytic_disk() {
        let geom = ScanGeometry::limited_view(60.0, 64);
        let disk = EllipsePhantom::new(0, vec![Ellipse::disk(0.0, 0.0, 0.6, 1.0)]);
        let h = SystemMatrix::build(&geom, 64).unwrap();
        let discrete = h.apply(&rasterize(&disk, 64).unwrap()).unwrap();
        let exact = analytic_sinogram(&disk, &geom).unwrap();
        let rel = vecops::dist(discrete.values(), exact.values()) / vecops::norm(exact.values());
        assert!(rel < 0.02, "relative discrepancy {rel}");
    }

    #[test]
    fn normalization_rescales_operator_and_data() {
        let geom = ScanGeometry::limited_view(60.0, 16);
        let raw = SystemMatrix::build(&geom, 16).unwrap();
        let norm = raw.clone().normalized();
        assert!((norm.norm_estimate() - 1.0).abs() < 1e-9);
        assert!((norm.scale() - raw.norm_estimate()).abs() < 1e-12);
        let p = generate_phantom(3, &PhantomConfig::default()).unwrap();
        let f = rasterize(&p, 16).unwrap();
        let g_raw = raw.apply(&f).unwrap();
        let g_norm = norm.apply(&f).unwrap();
        let mapped = norm.normalize_data(&g_raw);
        assert!(vecops::dist(mapped.values(), g_norm.values()) < 1e-12 * vecops::norm(g_norm.values()));
    }

    #[test]
    fn coo_dump_lists_every_entry() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.coo");
        let h = SystemMatrix::build(&ScanGeometry::limited_view(3.0, 4), 4).unwrap();
        h.write_coo(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), h.nnz() + 1);
        assert!(text.starts_with(&format!("# 12 16 {}", h.nnz())));
    }
}
