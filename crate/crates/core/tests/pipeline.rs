use dlrecon::harness::{self, Case, ExperimentConfig, Method, Scenario, Split};
use dlrecon::metrics::rmse;
use dlrecon::phantom::{analytic_sinogram, generate_phantom, rasterize, PhantomConfig};
use dlrecon::projector::{ScanGeometry, SystemMatrix};

#[test]
fn model_error_residual_is_small_but_nonzero() {
    let geometry = ScanGeometry::limited_view(60.0, 64);
    let h = SystemMatrix::build(&geometry, 64).unwrap().normalized();
    for seed in 0..3 {
        let phantom = generate_phantom(seed, &PhantomConfig::default()).unwrap();
        let hf = h.apply(&rasterize(&phantom, 64).unwrap()).unwrap();
        let g = h.normalize_data(&analytic_sinogram(&phantom, &geometry).unwrap());
        let num: f64 = g.values().iter().zip(hf.values()).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = g.values().iter().map(|a| a * a).sum();
        let rel = (num / den).sqrt();
        assert!(rel > 0.0 && rel < 0.05, "seed {seed}: {rel}");
    }
}

#[test]
fn micro_experiment_writes_consistent_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        scenarios: vec![Scenario::InverseCrime, Scenario::ModelErrorNoise],
        ..ExperimentConfig::micro(dir.path().to_owned())
    };
    let reports = harness::run_experiment(&cfg).unwrap();
    assert_eq!(reports.len(), 2);
    for report in &reports {
        assert_eq!(report.methods.len(), Method::ALL.len());
        for m in &report.methods {
            assert!(m.failure.is_none(), "{}: {:?}", m.method, m.failure);
            assert_eq!(m.per_image.len(), cfg.test_size);
            assert!(m.mean_rmse.is_finite() && m.mean_ssim.is_finite());
        }
        assert_eq!(report.mean_trace.len(), cfg.recon.n_outer);
    }
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * Method::ALL.len());
    assert!(csv.starts_with("method,scenario,mean_rmse,mean_ssim,std_rmse,std_ssim,status"));
    assert!(dir.path().join("trace_fig1.csv").exists());
    assert!(!dir.path().join("FAILED").exists());

    // the stored stage-2 weights reproduce the reported proposed RMSE
    let case = cfg.cases()[0];
    let ctx = harness::prepare_case(&cfg, &case).unwrap();
    let test = harness::make_split(&cfg, &ctx, Split::Test).unwrap();
    let net = harness::load_network(&ctx, 2).unwrap();
    let recon_cfg = cfg.recon_for(&case);
    let mut total = 0.0;
    for item in &test.items {
        let s = item.sample();
        let (f, _) = dlrecon::recon::reconstruct(&s.data, &ctx.model(), &net, &recon_cfg, None).unwrap();
        total += rmse(&f, &s.truth).unwrap();
    }
    let reported = reports[0].method(Method::Proposed).unwrap().mean_rmse;
    assert!((total / test.len() as f64 - reported).abs() < 1e-9 * reported.max(1.0));
}

#[test]
fn noise_differs_across_images_but_not_runs() {
    let cfg = ExperimentConfig::micro(std::path::PathBuf::from("unused"));
    let case = Case {
        scenario: Scenario::ModelErrorNoise,
        angular_range: 60.0,
    };
    let h = SystemMatrix::build(&ScanGeometry::limited_view(60.0, cfg.num_detectors), cfg.side)
        .unwrap()
        .normalized();
    let a = harness::generate_dataset(&cfg, &case, &h, Split::Val).unwrap();
    let b = harness::generate_dataset(&cfg, &case, &h, Split::Val).unwrap();
    for (x, y) in a.items.iter().zip(&b.items) {
        assert_eq!(x.noisy, y.noisy);
    }
    let noise = |i: usize| -> Vec<f64> {
        let item = &a.items[i];
        item.noisy.as_ref().unwrap().values().iter().zip(item.clean.values()).map(|(n, c)| n - c).collect()
    };
    assert_ne!(noise(0), noise(1));
}
