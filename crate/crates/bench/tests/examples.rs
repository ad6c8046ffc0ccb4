use statrs::distribution::{ContinuousCDF, Normal};
use voxquant::engine::{deserialize_engine, EngineError, ENGINE_MAGIC};
use voxquant::graph::{parse_model, serialize_model, OpKind};
use voxquant::kernels::{dice_per_class, Volume};
use voxquant::qdq::QdqPolicy;
use voxquant_bench::data::{band_exit_fraction, gen_synthetic_dataset, Dataset, DatasetConfig};
use voxquant_bench::eval::{evaluate_dice, Runnable, Runner};
use voxquant_bench::latency::BenchConfig;
use voxquant_bench::pipeline::{run_pipeline, Artifacts, PipelineConfig, FAKE_MODEL, MANIFEST};
use voxquant_bench::report::compare_report;
use voxquant_bench::sweep::{scaling_sweep, SweepConfig};
use voxquant_bench::zoo::{gen_model, ModelConfig, ModelFamily, Scale};
use voxquant_bench::{io, BenchError, Stage};

fn data(seed: u64, count: usize, side: usize, noise: f64) -> Dataset {
    Dataset::generate(DatasetConfig {
        seed,
        count,
        shape: [side; 3],
        classes: 4,
        noise,
    })
    .unwrap()
}

fn model(family: ModelFamily, scale: Scale, side: usize) -> voxquant::graph::Graph {
    gen_model(&ModelConfig {
        family,
        scale,
        classes: 4,
        spatial: [side; 3],
        seed: 7,
    })
    .unwrap()
}

#[test]
fn dataset_generation_is_byte_identical() {
    let cfg = DatasetConfig {
        seed: 1,
        count: 2,
        shape: [16, 16, 16],
        classes: 4,
        noise: 0.01,
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_synthetic_dataset(&cfg, a.path()).unwrap();
    gen_synthetic_dataset(&cfg, b.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 9);
    for n in names {
        assert_eq!(
            std::fs::read(a.path().join(&n)).unwrap(),
            std::fs::read(b.path().join(&n)).unwrap(),
            "{n:?}"
        );
    }
    let loaded = Dataset::load(a.path()).unwrap();
    assert_eq!(loaded.volumes, Dataset::generate(cfg).unwrap().volumes);
}

#[test]
fn band_exit_fraction_matches_gaussian_tail() {
    let normal = Normal::new(0.0, 1.0).unwrap();
    for sigma in [0.01, 0.05, 0.1] {
        let ds = data(2, 2, 24, sigma);
        let predicted = 2.0 * normal.cdf(-(0.25 / 2.0) / sigma);
        let measured = band_exit_fraction(&ds);
        assert!(
            (measured - predicted).abs() <= 0.01,
            "sigma {sigma}: {measured} vs {predicted}"
        );
    }
    assert_eq!(band_exit_fraction(&data(2, 2, 24, 0.0)), 0.0);
}

#[test]
fn centroid_net_is_near_exact_on_noiseless_data() {
    let ds = data(5, 3, 64, 0.0);
    let g = model(ModelFamily::CentroidNet, Scale::S, 64);
    let d = evaluate_dice(Runnable::Graph(&g), &ds, 1).unwrap();
    assert!(d.mean >= 0.99, "{d:?}");
    // A voxel whose 3x3x3 neighbourhood has a single label averages to its
    // band centre, so only voxels next to a boundary may flip.
    let mut r = Runner::new(Runnable::Graph(&g), 1).unwrap();
    let pred = r.predict(&ds.volumes[0]).unwrap();
    let lbl = &ds.labels[0].data;
    let n = 64;
    let at = |z: usize, y: usize, x: usize| lbl[(z * n + y) * n + x];
    for z in 1..n - 1 {
        for y in 1..n - 1 {
            for x in 1..n - 1 {
                let c = at(z, y, x);
                let uniform = (0..27).all(|i| at(z + i / 9 - 1, y + i / 3 % 3 - 1, x + i % 3 - 1) == c);
                if uniform {
                    assert_eq!(pred.data[(z * n + y) * n + x], c, "({z},{y},{x})");
                }
            }
        }
    }
    assert_eq!(dice_per_class(&pred, &ds.labels[0], 4).unwrap().per_class.len(), 4);
}

#[test]
fn pipeline_writes_engine_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let g = model(ModelFamily::CentroidNet, Scale::S, 16);
    let calib = data(1, 8, 16, 0.01).volumes;
    let out = run_pipeline(&g, &calib, &PipelineConfig::default(), dir.path()).unwrap();
    let engine = io::read(&dir.path().join("engine.vqe")).unwrap();
    assert_eq!(&engine[..4], ENGINE_MAGIC);
    assert_eq!(engine, out.engine);
    let manifest: serde_json::Value = io::read_json(&dir.path().join(MANIFEST)).unwrap();
    let stages: Vec<&str> = manifest["stages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["stage"].as_str().unwrap())
        .collect();
    assert_eq!(stages, ["calibrate", "quantize", "build"]);
    assert_eq!(manifest["stages"][2]["outputs"]["engine.vqe"], io::sha256_hex(&engine));

    let again = tempfile::tempdir().unwrap();
    let out2 = run_pipeline(&g, &calib, &PipelineConfig::default(), again.path()).unwrap();
    assert_eq!(io::sha256_hex(&out.engine), io::sha256_hex(&out2.engine));
    assert_eq!(out.manifest, out2.manifest);
    let a = Artifacts::load(dir.path()).unwrap();
    assert_eq!(a.fp32, g);
    assert_eq!(a.fake, out.fake);
}

#[test]
fn four_bit_pipeline_fails_at_build_after_writing_fake_model() {
    let dir = tempfile::tempdir().unwrap();
    let g = model(ModelFamily::CentroidNet, Scale::S, 16);
    let cfg = PipelineConfig {
        policy: QdqPolicy::default().with_bits(4),
        ..Default::default()
    };
    let err = run_pipeline(&g, &data(1, 2, 16, 0.01).volumes, &cfg, dir.path()).unwrap_err();
    assert!(
        matches!(
            err,
            BenchError::Stage {
                stage: Stage::Build,
                ..
            }
        ),
        "{err}"
    );
    assert!(matches!(
        err.root(),
        BenchError::Engine(EngineError::UnsupportedBits { bits: 4, .. })
    ));
    assert_eq!(err.exit_code(), 4);
    let fake = io::load_model(&dir.path().join(FAKE_MODEL)).unwrap();
    assert_eq!(fake.count_kind(OpKind::Quantize), 5);
    assert!(!dir.path().join("engine.vqe").exists());
    let manifest: serde_json::Value = io::read_json(&dir.path().join(MANIFEST)).unwrap();
    assert_eq!(manifest["failed_stage"], "build");
}

#[test]
fn calibration_errors_name_their_stage() {
    let dir = tempfile::tempdir().unwrap();
    let g = model(ModelFamily::CentroidNet, Scale::S, 16);
    let err = run_pipeline(&g, &[], &PipelineConfig::default(), dir.path()).unwrap_err();
    assert!(err.to_string().starts_with("calibrate stage failed"), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn toy_unet_round_trips_structurally() {
    let g = model(ModelFamily::ToyUnet, Scale::S, 16);
    assert!(g.nodes.len() >= 20);
    let (doc, blob) = serialize_model(&g);
    assert_eq!(parse_model(&doc, &blob).unwrap(), g);
}

#[test]
fn compare_report_rows() {
    let dir = tempfile::tempdir().unwrap();
    let ds = data(9, 4, 32, 0.01);
    let calib = data(10, 4, 32, 0.01).volumes;
    let mut arts = Vec::new();
    for (name, g) in [
        ("cn", model(ModelFamily::CentroidNet, Scale::S, 32)),
        ("tu", model(ModelFamily::ToyUnet, Scale::S, 32)),
    ] {
        let d = dir.path().join(name);
        run_pipeline(&g, &calib, &PipelineConfig::default(), &d).unwrap();
        arts.push(Artifacts::load(&d).unwrap());
    }
    let cfg = BenchConfig {
        warmup_runs: 0,
        timed_runs: 3,
        ..Default::default()
    };
    let report = compare_report(&arts, &ds, &cfg).unwrap();
    report.check_consistency().unwrap();
    let (cn, tu) = (&report.rows[0], &report.rows[1]);
    assert!((cn.fp32_mdsc - cn.int8_mdsc).abs() <= 0.01, "{cn:?}");
    // Fake quantization keeps every weight in FP32.
    assert_eq!(cn.fake_weight_bytes, cn.fp32_weight_bytes);
    assert_eq!(tu.fake_weight_bytes, tu.fp32_weight_bytes);
    assert!((tu.fake_size_ratio - 1.0).abs() < 0.05, "{tu:?}");
    assert!(tu.size_ratio >= 2.4, "{tu:?}");
    let out = dir.path().join("report.json");
    report.write(&out).unwrap();
    assert!(io::read(&out.with_extension("txt")).unwrap().starts_with(b"model"));

    let mut broken = report.clone();
    broken.rows[0].size_ratio *= 1.5;
    assert!(broken.check_consistency().is_err());
    assert!(matches!(
        Artifacts::load(&dir.path().join("missing")),
        Err(BenchError::MissingArtifact(_))
    ));
}

#[test]
fn sweep_ratios_and_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let calib = data(3, 2, 16, 0.01).volumes;
    let mut cfg = SweepConfig {
        family: ModelFamily::ToyUnet,
        scales: vec![Scale::S, Scale::M, Scale::L],
        classes: 4,
        spatial: [16; 3],
        seed: 1,
        pipeline: PipelineConfig::default(),
        bench: None,
    };
    let r = scaling_sweep(&cfg, &calib, dir.path()).unwrap();
    assert!(r.ratio_non_decreasing, "{r:?}");
    assert!(r.rows.iter().all(|row| row.ratio < 4.0), "{r:?}");
    assert!(r.rows[2].ratio >= r.rows[1].ratio && r.rows[1].ratio >= r.rows[0].ratio);

    cfg.scales = vec![Scale::M];
    assert!(matches!(
        scaling_sweep(&cfg, &calib, dir.path()),
        Err(BenchError::InvalidConfig(_))
    ));
}

#[test]
fn engine_outputs_match_between_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let g = model(ModelFamily::ToyUnet, Scale::S, 16);
    let out = run_pipeline(
        &g,
        &data(4, 2, 16, 0.01).volumes,
        &PipelineConfig::default(),
        dir.path(),
    )
    .unwrap();
    let plan = deserialize_engine(&out.engine).unwrap();
    let x: Volume = data(5, 1, 16, 0.01).volumes.remove(0);
    let one = Runner::new(Runnable::Engine(&plan), 1).unwrap().run(&x).unwrap();
    let four = Runner::new(Runnable::Engine(&plan), 4).unwrap().run(&x).unwrap();
    assert_eq!(one, four);
}
