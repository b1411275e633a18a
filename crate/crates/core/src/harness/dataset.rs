use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{Case, ExperimentConfig, Scenario, Split};
use crate::error::{Error, Result};
use crate::image::{read_f32, sidecar, write_f32, Image, Sinogram};
use crate::phantom::{self, EllipsePhantom};
use crate::projector::SystemMatrix;
use crate::recon::Sample;

/// `g + ε` with `ε ~ N(0, (fraction·max g)²)` i.i.d., seeded.
pub fn add_noise(g: &Sinogram, fraction: f64, seed: u64) -> Result<Sinogram> {
    if !(fraction >= 0.0) {
        return Err(Error::InvalidConfig(format!("noise fraction {fraction} < 0")));
    }
    if fraction == 0.0 {
        return Ok(g.clone());
    }
    let sigma = fraction * g.max();
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| Error::InvalidConfig(format!("noise σ = {sigma}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = g.values().iter().map(|v| v + normal.sample(&mut rng)).collect();
    Sinogram::from_values(g.num_views(), g.num_detectors(), values)
}

#[derive(Clone, Debug)]
pub struct DataItem {
    pub phantom: EllipsePhantom,
    pub truth: Image,
    /// Noise-free data, in the units of the normalized system matrix.
    pub clean: Sinogram,
    pub noisy: Option<Sinogram>,
}

impl DataItem {
    pub fn seed(&self) -> u64 {
        self.phantom.seed
    }

    /// The data handed to reconstruction.
    pub fn measured(&self) -> &Sinogram {
        self.noisy.as_ref().unwrap_or(&self.clean)
    }

    pub fn sample(&self) -> Sample {
        Sample {
            truth: self.truth.clone(),
            data: self.measured().clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub split: Split,
    pub items: Vec<DataItem>,
}

/// Phantoms with seeds `seed + split offset + i`, rasterized truth and the
/// scenario's data: `H·truth` for the inverse crime, analytic line
/// integrals (rescaled to `H`'s normalization) otherwise, plus noise for
/// `model_error_noise`.
pub fn generate_dataset(config: &ExperimentConfig, case: &Case, h: &SystemMatrix, split: Split) -> Result<Dataset> {
    let base = config.seed.wrapping_add(split.seed_offset());
    let noise = config.effective_noise(case.scenario);
    let mut items = Vec::with_capacity(config.split_size(split));
    for i in 0..config.split_size(split) as u64 {
        let seed = base.wrapping_add(i);
        let phantom = phantom::generate_phantom(seed, &config.phantom)?;
        let truth = phantom::rasterize(&phantom, config.side)?;
        let clean = match case.scenario {
            Scenario::InverseCrime => h.apply(&truth)?,
            Scenario::ModelError | Scenario::ModelErrorNoise => {
                h.normalize_data(&phantom::analytic_sinogram(&phantom, h.geometry())?)
            }
        };
        let noisy = if noise > 0.0 {
            Some(add_noise(&clean, noise, config.noise_seed.wrapping_add(seed))?)
        } else {
            None
        };
        items.push(DataItem {
            phantom,
            truth,
            clean,
            noisy,
        });
    }
    Ok(Dataset { split, items })
}

#[derive(Serialize, Deserialize)]
struct StackMeta {
    count: usize,
    /// Shape of one entry: `[side, side]` or `[views, detectors]`.
    shape: [usize; 2],
}

fn write_stack(path: &Path, shape: [usize; 2], rows: &[&[f64]]) -> Result<()> {
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    write_f32(path, &flat)?;
    let meta = StackMeta {
        count: rows.len(),
        shape,
    };
    fs::write(sidecar(path), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

fn read_stack(path: &Path) -> Result<(StackMeta, Vec<f64>)> {
    let meta: StackMeta = serde_json::from_slice(&fs::read(sidecar(path))?)?;
    let flat = read_f32(path)?;
    if flat.len() != meta.count * meta.shape[0] * meta.shape[1] {
        return Err(Error::Format {
            path: path.to_owned(),
            reason: format!("{} values for {} entries of {:?}", flat.len(), meta.count, meta.shape),
        });
    }
    Ok((meta, flat))
}

impl Dataset {
    pub fn samples(&self) -> Vec<Sample> {
        self.items.iter().map(DataItem::sample).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Writes `phantoms.jsonl` plus stacked `truth.f32`, `clean.f32` and,
    /// when present, `noisy.f32` (each with a JSON shape sidecar).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let phantoms: Vec<EllipsePhantom> = self.items.iter().map(|d| d.phantom.clone()).collect();
        phantom::write_jsonl(&dir.join("phantoms.jsonl"), &phantoms)?;
        let Some(first) = self.items.first() else {
            return Ok(());
        };
        let side = first.truth.side();
        let shape = [first.clean.num_views(), first.clean.num_detectors()];
        let truths: Vec<&[f64]> = self.items.iter().map(|d| d.truth.pixels()).collect();
        write_stack(&dir.join("truth.f32"), [side, side], &truths)?;
        let clean: Vec<&[f64]> = self.items.iter().map(|d| d.clean.values()).collect();
        write_stack(&dir.join("clean.f32"), shape, &clean)?;
        if self.items.iter().all(|d| d.noisy.is_some()) {
            let noisy: Vec<&[f64]> = self
                .items
                .iter()
                .map(|d| d.noisy.as_ref().expect("checked").values())
                .collect();
            write_stack(&dir.join("noisy.f32"), shape, &noisy)?;
        }
        Ok(())
    }

    /// Reads a directory written by [`Dataset::save`]. Values come back at
    /// `f32` precision.
    pub fn load(dir: &Path, split: Split) -> Result<Self> {
        let phantoms = phantom::read_jsonl(&dir.join("phantoms.jsonl"))?;
        if phantoms.is_empty() {
            return Ok(Self { split, items: Vec::new() });
        }
        let (tm, truth) = read_stack(&dir.join("truth.f32"))?;
        let (cm, clean) = read_stack(&dir.join("clean.f32"))?;
        let noisy_path = dir.join("noisy.f32");
        let noisy = if noisy_path.exists() { Some(read_stack(&noisy_path)?) } else { None };
        Error::check_len("dataset truth entries", phantoms.len(), tm.count)?;
        Error::check_len("dataset data entries", phantoms.len(), cm.count)?;
        let (tn, cn) = (tm.shape[0] * tm.shape[1], cm.shape[0] * cm.shape[1]);
        let mut items = Vec::with_capacity(phantoms.len());
        for (i, phantom) in phantoms.into_iter().enumerate() {
            let sino = |flat: &[f64]| Sinogram::from_values(cm.shape[0], cm.shape[1], flat[i * cn..(i + 1) * cn].to_vec());
            items.push(DataItem {
                phantom,
                truth: Image::from_pixels(tm.shape[0], truth[i * tn..(i + 1) * tn].to_vec())?,
                clean: sino(&clean)?,
                noisy: noisy.as_ref().map(|(_, flat)| sino(flat)).transpose()?,
            });
        }
        Ok(Self { split, items })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projector::ScanGeometry;
    use crate::vecops;

    fn config() -> ExperimentConfig {
        ExperimentConfig {
            side: 16,
            num_detectors: 8,
            train_size: 4,
            val_size: 2,
            test_size: 3,
            ..ExperimentConfig::default()
        }
    }

    fn operator(cfg: &ExperimentConfig) -> SystemMatrix {
        SystemMatrix::build(&ScanGeometry::limited_view(60.0, cfg.num_detectors), cfg.side)
            .unwrap()
            .normalized()
    }

    #[test]
    fn zero_noise_is_identity() {
        let g = Sinogram::from_values(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(add_noise(&g, 0.0, 1).unwrap(), g);
        assert!(add_noise(&g, -1.0, 1).is_err());
    }

    #[test]
    fn noise_sigma_matches_fraction_of_max() {
        let g = Sinogram::from_values(100, 100, (0..10_000).map(|i| (i % 97) as f64 / 10.0).collect()).unwrap();
        let target = 0.02 * g.max();
        let mut draws = Vec::new();
        for seed in [1, 2] {
            let noisy = add_noise(&g, 0.02, seed).unwrap();
            let diff: Vec<f64> = noisy.values().iter().zip(g.values()).map(|(a, b)| a - b).collect();
            let mean = diff.iter().sum::<f64>() / diff.len() as f64;
            let sd = (diff.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diff.len() - 1) as f64).sqrt();
            assert!((sd / target - 1.0).abs() < 0.05, "σ {sd} vs {target}");
            draws.push(noisy);
        }
        assert_ne!(draws[0], draws[1]);
    }

    #[test]
    fn splits_use_disjoint_seeds() {
        let cfg = config();
        let h = operator(&cfg);
        let case = Case {
            scenario: Scenario::InverseCrime,
            angular_range: 60.0,
        };
        let seeds: Vec<Vec<u64>> = Split::ALL
            .iter()
            .map(|&s| generate_dataset(&cfg, &case, &h, s).unwrap().items.iter().map(DataItem::seed).collect())
            .collect();
        assert_eq!(seeds[0], [0, 1, 2, 3]);
        assert_eq!(seeds[1], [1_000_000, 1_000_001]);
        assert_eq!(seeds[2], [2_000_000, 2_000_001, 2_000_002]);
    }

    #[test]
    fn scenario_data_residuals() {
        let cfg = config();
        let h = operator(&cfg);
        for scenario in [Scenario::InverseCrime, Scenario::ModelError, Scenario::ModelErrorNoise] {
            let case = Case {
                scenario,
                angular_range: 60.0,
            };
            let ds = generate_dataset(&cfg, &case, &h, Split::Test).unwrap();
            for item in &ds.items {
                let hf = h.apply(&item.truth).unwrap();
                let res = vecops::dist(item.measured().values(), hf.values());
                match scenario {
                    Scenario::InverseCrime => assert_eq!(res, 0.0),
                    _ => assert!(res > 0.0),
                }
                assert_eq!(item.noisy.is_some(), scenario == Scenario::ModelErrorNoise);
            }
        }
    }

    #[test]
    fn save_is_deterministic_and_loads_back() {
        let cfg = config();
        let h = operator(&cfg);
        let case = Case {
            scenario: Scenario::ModelErrorNoise,
            angular_range: 60.0,
        };
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        generate_dataset(&cfg, &case, &h, Split::Train).unwrap().save(&a).unwrap();
        generate_dataset(&cfg, &case, &h, Split::Train).unwrap().save(&b).unwrap();
        for name in ["phantoms.jsonl", "truth.f32", "clean.f32", "noisy.f32", "noisy.f32.json"] {
            assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
        }
        let back = Dataset::load(&a, Split::Train).unwrap();
        let orig = generate_dataset(&cfg, &case, &h, Split::Train).unwrap();
        assert_eq!(back.len(), 4);
        for (x, y) in back.items.iter().zip(&orig.items) {
            assert_eq!(x.phantom, y.phantom);
            assert!(vecops::dist(x.truth.pixels(), y.truth.pixels()) < 1e-6);
            assert!(vecops::dist(x.measured().values(), y.measured().values()) < 1e-5);
        }
    }
}
