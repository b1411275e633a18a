//! Pixel images and sinograms, plus their raw on-disk format.
//!
//! Both are stored as flat little-endian `f32` files with a JSON sidecar next
//! to them (`<file>.json`) describing the shape.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projector::ScanGeometry;

/// A square image in row-major order. Row 0 is the top of the object
/// (largest `y`), column 0 its left edge (smallest `x`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    side: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn zeros(side: usize) -> Self {
        Self {
            side,
            pixels: vec![0.0; side * side],
        }
    }

    pub fn from_pixels(side: usize, pixels: Vec<f64>) -> Result<Self> {
        if side < 2 {
            return Err(Error::InvalidConfig(format!("image side {side} < 2")));
        }
        Error::check_len("image pixels", side * side, pixels.len())?;
        Ok(Self { side, pixels })
    }

    pub fn from_fn(side: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(side * side);
        for row in 0..side {
            for col in 0..side {
                pixels.push(f(row, col));
            }
        }
        Self { side, pixels }
    }

    #[inline]
    pub fn side(&self) -> usize {
        self.side
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    #[inline]
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.side + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.pixels[row * self.side + col] = value;
    }

    /// Same-shape image built by applying `f` to every pixel.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            side: self.side,
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min(&self) -> f64 {
        self.pixels.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn write_raw(&self, path: &Path) -> Result<()> {
        write_f32(path, &self.pixels)?;
        let meta = ImageMeta { side: self.side };
        fs::write(sidecar(path), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn read_raw(path: &Path) -> Result<Self> {
        let meta: ImageMeta = serde_json::from_slice(&fs::read(sidecar(path))?)?;
        let pixels = read_f32(path)?;
        Self::from_pixels(meta.side, pixels).map_err(|e| Error::Format {
            path: path.to_owned(),
            reason: e.to_string(),
        })
    }

    /// 8-bit binary PGM, min-max scaled, for eyeballing results.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let (lo, hi) = (self.min(), self.max());
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut out = format!("P5\n{} {}\n255\n", self.side, self.side).into_bytes();
        out.extend(
            self.pixels
                .iter()
                .map(|&v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8),
        );
        fs::write(path, out)?;
        Ok(())
    }
}

/// Measured data: one row of detector readings per view.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    num_views: usize,
    num_detectors: usize,
    values: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(num_views: usize, num_detectors: usize) -> Self {
        Self {
            num_views,
            num_detectors,
            values: vec![0.0; num_views * num_detectors],
        }
    }

    pub fn from_values(num_views: usize, num_detectors: usize, values: Vec<f64>) -> Result<Self> {
        Error::check_len("sinogram values", num_views * num_detectors, values.len())?;
        Ok(Self {
            num_views,
            num_detectors,
            values,
        })
    }

    pub fn num_views(&self) -> usize {
        self.num_views
    }

    pub fn num_detectors(&self) -> usize {
        self.num_detectors
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, view: usize, detector: usize) -> f64 {
        self.values[view * self.num_detectors + detector]
    }

    pub fn view(&self, view: usize) -> &[f64] {
        let start = view * self.num_detectors;
        &self.values[start..start + self.num_detectors]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            num_views: self.num_views,
            num_detectors: self.num_detectors,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn write_raw(&self, path: &Path, geometry: Option<&ScanGeometry>) -> Result<()> {
        write_f32(path, &self.values)?;
        let meta = SinogramMeta {
            num_views: self.num_views,
            num_detectors: self.num_detectors,
            geometry: geometry.cloned(),
        };
        fs::write(sidecar(path), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn read_raw(path: &Path) -> Result<(Self, Option<ScanGeometry>)> {
        let meta: SinogramMeta = serde_json::from_slice(&fs::read(sidecar(path))?)?;
        let values = read_f32(path)?;
        let sino = Self::from_values(meta.num_views, meta.num_detectors, values).map_err(|e| {
            Error::Format {
                path: path.to_owned(),
                reason: e.to_string(),
            }
        })?;
        Ok((sino, meta.geometry))
    }
}

#[derive(Serialize, Deserialize)]
struct ImageMeta {
    side: usize,
}

#[derive(Serialize, Deserialize)]
struct SinogramMeta {
    num_views: usize,
    num_detectors: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    geometry: Option<ScanGeometry>,
}

pub(crate) fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

pub(crate) fn write_f32(path: &Path, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_f32(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format {
            path: path.to_owned(),
            reason: format!("length {} is not a multiple of 4", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}
