//! Dense SVD of the system matrix and the operators derived from it: the
//! Moore–Penrose pseudoinverse and the orthogonal projectors onto the
//! measurable subspace (row space of `H`) and the null space of `H`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{Image, Sinogram};
use crate::projector::{ScanGeometry, SystemMatrix};

/// Relative cutoff below which singular values count as zero.
pub const DEFAULT_TRUNCATION: f64 = 1e-10;
/// Largest column count accepted for a dense SVD.
pub const DEFAULT_MAX_COLUMNS: usize = 16_384;

const MAX_SWEEPS: usize = 10_000;

/// `H ≈ U diag(σ) Vᵀ` with only the singular values above the truncation kept.
#[derive(Clone, Debug)]
pub struct SvdFactors {
    side: usize,
    num_views: usize,
    num_detectors: usize,
    /// m × r
    left: DMatrix<f64>,
    /// r values, strictly positive, descending
    singular_values: Vec<f64>,
    /// n × r
    right: DMatrix<f64>,
}

impl SvdFactors {
    pub fn compute(h: &SystemMatrix, truncation_tol: f64) -> Result<Self> {
        Self::compute_with_limit(h, truncation_tol, DEFAULT_MAX_COLUMNS)
    }

    pub fn compute_with_limit(h: &SystemMatrix, truncation_tol: f64, max_columns: usize) -> Result<Self> {
        if h.cols() > max_columns {
            return Err(Error::MemoryBudget {
                what: "dense SVD",
                required: h.cols() * h.rows() * 8,
                budget: max_columns * h.rows() * 8,
            });
        }
        let geom = h.geometry();
        Self::from_dense(h.to_dense(), truncation_tol, h.side(), geom.num_views, geom.num_detectors)
    }

    /// Factors an arbitrary dense matrix. `side` must satisfy `side² = ncols`.
    pub fn from_dense(
        dense: DMatrix<f64>,
        truncation_tol: f64,
        side: usize,
        num_views: usize,
        num_detectors: usize,
    ) -> Result<Self> {
        let (m, n) = dense.shape();
        Error::check_len("matrix columns", side * side, n)?;
        Error::check_len("matrix rows", num_views * num_detectors, m)?;
        let svd = dense
            .try_svd(true, true, f64::EPSILON, MAX_SWEEPS)
            .ok_or(Error::SvdNotConverged(MAX_SWEEPS))?;
        let u = svd.u.ok_or(Error::SvdNotConverged(MAX_SWEEPS))?;
        let v_t = svd.v_t.ok_or(Error::SvdNotConverged(MAX_SWEEPS))?;

        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let sigma_max = order.first().map_or(0.0, |&i| svd.singular_values[i]);
        let cutoff = truncation_tol * sigma_max;
        let kept: Vec<usize> = order
            .into_iter()
            .filter(|&i| svd.singular_values[i] > cutoff && svd.singular_values[i] > 0.0)
            .collect();

        let r = kept.len();
        let mut left = DMatrix::zeros(m, r);
        let mut right = DMatrix::zeros(n, r);
        let mut singular_values = Vec::with_capacity(r);
        for (j, &i) in kept.iter().enumerate() {
            left.set_column(j, &u.column(i));
            right.set_column(j, &v_t.row(i).transpose());
            singular_values.push(svd.singular_values[i]);
        }
        Ok(Self {
            side,
            num_views,
            num_detectors,
            left,
            singular_values,
            right,
        })
    }

    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn left_vectors(&self) -> &DMatrix<f64> {
        &self.left
    }

    pub fn right_vectors(&self) -> &DMatrix<f64> {
        &self.right
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// `(views, detectors)` of the sinograms this operator accepts.
    pub fn data_shape(&self) -> (usize, usize) {
        (self.num_views, self.num_detectors)
    }

    pub fn rows(&self) -> usize {
        self.left.nrows()
    }

    pub fn cols(&self) -> usize {
        self.right.nrows()
    }

    /// Minimum-norm least-squares solution `V diag(1/σ) Uᵀ g`.
    pub fn pseudoinverse_apply(&self, g: &Sinogram) -> Result<Image> {
        Error::check_len("sinogram values", self.rows(), g.len())?;
        let g = DVector::from_column_slice(g.values());
        let mut coeffs = self.left.tr_mul(&g);
        for (c, s) in coeffs.iter_mut().zip(&self.singular_values) {
            *c /= s;
        }
        let f = &self.right * coeffs;
        Image::from_pixels(self.side, f.as_slice().to_vec())
    }

    pub fn projectors(&self) -> SpaceProjectors<'_> {
        SpaceProjectors { factors: self }
    }

    /// `U diag(σ) Vᵀ`
    pub fn reconstruct_dense(&self) -> DMatrix<f64> {
        let mut scaled = self.left.clone();
        for (j, s) in self.singular_values.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*s);
        }
        scaled * self.right.transpose()
    }

    /// Dense `H⁺` (n × m).
    pub fn pseudoinverse_matrix(&self) -> DMatrix<f64> {
        let mut scaled = self.right.clone();
        for (j, s) in self.singular_values.iter().enumerate() {
            scaled.column_mut(j).scale_mut(1.0 / s);
        }
        scaled * self.left.transpose()
    }

    /// Dense `VVᵀ` (n × n).
    pub fn measurable_projector_matrix(&self) -> DMatrix<f64> {
        &self.right * self.right.transpose()
    }

    pub fn save(&self, dir: &Path, manifest: &FactorManifest) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_f64(&dir.join("left.f64"), self.left.as_slice())?;
        write_f64(&dir.join("singular_values.f64"), &self.singular_values)?;
        write_f64(&dir.join("right.f64"), self.right.as_slice())?;
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, FactorManifest)> {
        let manifest: FactorManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let m = manifest.geometry.num_rays();
        let n = manifest.side * manifest.side;
        let r = manifest.rank;
        let bad = |what: &str| Error::Format {
            path: dir.to_owned(),
            reason: format!("{what} has the wrong length"),
        };
        let left = read_f64(&dir.join("left.f64"))?;
        let singular_values = read_f64(&dir.join("singular_values.f64"))?;
        let right = read_f64(&dir.join("right.f64"))?;
        if left.len() != m * r {
            return Err(bad("left vectors"));
        }
        if singular_values.len() != r {
            return Err(bad("singular values"));
        }
        if right.len() != n * r {
            return Err(bad("right vectors"));
        }
        let factors = Self {
            side: manifest.side,
            num_views: manifest.geometry.num_views,
            num_detectors: manifest.geometry.num_detectors,
            left: DMatrix::from_vec(m, r, left),
            singular_values,
            right: DMatrix::from_vec(n, r, right),
        };
        Ok((factors, manifest))
    }
}

/// `P_meas = VVᵀ` and `P_null = I − VVᵀ`.
#[derive(Clone, Copy, Debug)]
pub struct SpaceProjectors<'a> {
    factors: &'a SvdFactors,
}

impl SpaceProjectors<'_> {
    pub fn measurable(&self, f: &Image) -> Result<Image> {
        Error::check_len("image pixels", self.factors.cols(), f.len())?;
        let v = &self.factors.right;
        let x = DVector::from_column_slice(f.pixels());
        let coeffs = v.tr_mul(&x);
        let p = v * coeffs;
        Image::from_pixels(f.side(), p.as_slice().to_vec())
    }

    pub fn null(&self, f: &Image) -> Result<Image> {
        Ok(self.split(f)?.1)
    }

    /// `(P_meas f, P_null f)`; the two parts sum back to `f` up to rounding.
    pub fn split(&self, f: &Image) -> Result<(Image, Image)> {
        let meas = self.measurable(f)?;
        let null = Image::from_pixels(
            f.side(),
            f.pixels().iter().zip(meas.pixels()).map(|(a, b)| a - b).collect(),
        )?;
        Ok((meas, null))
    }
}

/// Identifies a cached factorization on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorManifest {
    pub geometry: ScanGeometry,
    pub side: usize,
    pub truncation_tol: f64,
    /// Scale the raw matrix was divided by before factoring.
    pub operator_scale: f64,
    pub rank: usize,
}

impl FactorManifest {
    /// Hex digest of the inputs that determine the factors.
    pub fn key(geometry: &ScanGeometry, side: usize, truncation_tol: f64, normalized: bool) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(geometry).expect("geometry serializes"));
        hasher.update(side.to_le_bytes());
        hasher.update(truncation_tol.to_le_bytes());
        hasher.update([normalized as u8]);
        hasher
            .finalize()
            .iter()
            .take(12)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Returns cached factors for `h` under `cache_root`, computing and storing them on a miss.
pub fn cached_factors(
    h: &SystemMatrix,
    truncation_tol: f64,
    cache_root: &Path,
) -> Result<SvdFactors> {
    let normalized = h.scale() != 1.0;
    let dir: PathBuf = cache_root.join(FactorManifest::key(h.geometry(), h.side(), truncation_tol, normalized));
    if dir.join("manifest.json").exists() {
        let (factors, manifest) = SvdFactors::load(&dir)?;
        if manifest.geometry == *h.geometry() && manifest.side == h.side() {
            return Ok(factors);
        }
    }
    let factors = SvdFactors::compute(h, truncation_tol)?;
    let manifest = FactorManifest {
        geometry: h.geometry().clone(),
        side: h.side(),
        truncation_tol,
        operator_scale: h.scale(),
        rank: factors.rank(),
    };
    factors.save(&dir, &manifest)?;
    Ok(factors)
}

fn write_f64(path: &Path, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_f64(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format {
            path: path.to_owned(),
            reason: "length is not a multiple of 8".into(),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}
