use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dlrecon::harness::ExperimentConfig;
use dlrecon::linops::SvdFactors;
use dlrecon::neural::Network;
use dlrecon::projector::{ScanGeometry, SystemMatrix};
use dlrecon::recon::{self, ForwardModel, ReconConfig};
use dlrecon::{Image, Sinogram};
use sha2::{Digest, Sha256};

fn dlrecon(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlrecon"))
        .args(args)
        .arg("--config")
        .arg(config)
        .output()
        .unwrap()
}

fn micro(dir: &Path, name: &str) -> (ExperimentConfig, PathBuf) {
    let cfg = ExperimentConfig::micro(dir.join(name));
    let path = dir.join(format!("{name}.json"));
    cfg.save(&path).unwrap();
    (cfg, path)
}

fn hash_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_owned()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let digest = Sha256::digest(fs::read(&path).unwrap());
                let name = path.strip_prefix(root).unwrap().display().to_string();
                out.push((name, digest.to_vec()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut hashes = Vec::new();
    for name in ["a", "b"] {
        let (cfg, path) = micro(dir.path(), name);
        let out = dlrecon(&["gen-data"], &path);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let data = cfg.output_dir.join("60deg_inverse_crime").join("data");
        hashes.push(hash_tree(&data));
    }
    assert!(hashes[0].len() >= 9, "{:?}", hashes[0]);
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn unknown_subcommand_fails() {
    let out = Command::new(env!("CARGO_BIN_EXE_dlrecon")).arg("frobnicate").output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn invalid_config_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"side": 4, "output_dir": "unused"}"#).unwrap();
    let out = dlrecon(&["gen-data"], &path);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn reconstruct_with_one_outer_iteration_is_single_pass() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, path) = micro(dir.path(), "m");
    let out = dlrecon(&["train", "--stage", "1"], &path);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stem = cfg.output_dir.join("60deg_inverse_crime").join("weights").join("stage1");

    let geometry = ScanGeometry::limited_view(60.0, cfg.num_detectors);
    let h = SystemMatrix::build(&geometry, cfg.side).unwrap().normalized();
    let truth = Image::from_fn(cfg.side, |r, c| if (4..12).contains(&r) && (5..10).contains(&c) { 1.0 } else { 0.0 });
    let g = h.apply(&truth).unwrap();
    let sino_path = dir.path().join("g.f32");
    g.write_raw(&sino_path, Some(&geometry)).unwrap();

    let image_path = dir.path().join("out").join("f.f32");
    let out = dlrecon(
        &[
            "reconstruct",
            "--sinogram",
            sino_path.to_str().unwrap(),
            "--weights",
            stem.to_str().unwrap(),
            "--out",
            image_path.to_str().unwrap(),
            "--n",
            "1",
        ],
        &path,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cli_image = Image::read_raw(&image_path).unwrap();
    assert!(image_path.with_extension("pgm").exists());

    // the stored sinogram is f32, so rebuild the expected value from it
    let (g32, _) = Sinogram::read_raw(&sino_path).unwrap();
    let factors = SvdFactors::compute(&h, cfg.svd_truncation).unwrap();
    let model = ForwardModel::new(&h, Some(&factors));
    let (net, _) = Network::load(&stem).unwrap();
    let expected = recon::single_pass(&g32, &model, &net, &ReconConfig::default()).unwrap();
    let diff = cli_image
        .pixels()
        .iter()
        .zip(expected.pixels())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-5, "max difference {diff}");
}
