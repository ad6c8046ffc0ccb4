//! Wall-clock checks. Kept in one test so nothing else competes for the CPU.
use std::time::Instant;
use voxquant_bench::data::{Dataset, DatasetConfig};
use voxquant_bench::eval::{Runnable, Runner};
use voxquant_bench::latency::{bench_latency, BenchConfig, LatencyStats};
use voxquant_bench::pipeline::{run_pipeline, PipelineConfig};
use voxquant_bench::zoo::{gen_model, ModelConfig, ModelFamily, Scale};

fn model(family: ModelFamily, scale: Scale, side: usize) -> voxquant::graph::Graph {
    gen_model(&ModelConfig {
        family,
        scale,
        classes: 4,
        spatial: [side; 3],
        seed: 3,
    })
    .unwrap()
}

fn median_us(r: Runnable<'_>) -> f64 {
    let cfg = BenchConfig {
        warmup_runs: 2,
        timed_runs: 9,
        ..Default::default()
    };
    let s = bench_latency(r, &cfg).unwrap();
    assert_eq!(s.samples_us.len(), 9);
    s.median_us
}

#[test]
fn latency_behaviour() {
    // FP32 conv cost is linear in voxel count.
    let small = median_us(Runnable::Graph(&model(ModelFamily::ToyUnet, Scale::S, 32)));
    let large = median_us(Runnable::Graph(&model(ModelFamily::ToyUnet, Scale::S, 64)));
    let growth = large / small;
    eprintln!("fp32 32^3 {small:.0} us, 64^3 {large:.0} us, x{growth:.2}");
    assert!((4.0..=12.0).contains(&growth), "{growth}");

    // The fake-quantized graph runs the same FP32 convs plus elementwise QDQ.
    let g = model(ModelFamily::ToyUnet, Scale::M, 32);
    let calib = Dataset::generate(DatasetConfig {
        seed: 1,
        count: 2,
        shape: [32; 3],
        classes: 4,
        noise: 0.01,
    })
    .unwrap()
    .volumes;
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(&g, &calib, &PipelineConfig::default(), dir.path()).unwrap();
    // Interleaved so that clock drift hits both sides alike.
    let x = &calib[0];
    let (mut a, mut b) = (
        Runner::new(Runnable::Graph(&g), 1).unwrap(),
        Runner::new(Runnable::Graph(&out.fake), 1).unwrap(),
    );
    a.run(x).unwrap();
    b.run(x).unwrap();
    let (mut ta, mut tb) = (Vec::new(), Vec::new());
    for _ in 0..15 {
        let t = Instant::now();
        a.run(x).unwrap();
        ta.push(t.elapsed().as_secs_f64() * 1e6);
        let t = Instant::now();
        b.run(x).unwrap();
        tb.push(t.elapsed().as_secs_f64() * 1e6);
    }
    let cfg = BenchConfig::default();
    let (fp32, fake) = (
        LatencyStats::from_samples(ta, &cfg).median_us,
        LatencyStats::from_samples(tb, &cfg).median_us,
    );
    let int8 = median_us(Runnable::Engine(&out.plan));
    eprintln!("toy-unet M 32^3: fp32 {fp32:.0} us, fake {fake:.0} us, int8 {int8:.0} us");
    assert!((fake / fp32 - 1.0).abs() <= 0.10, "fake/fp32 {}", fake / fp32);
    assert!(int8 < fp32);

    let runs = BenchConfig {
        warmup_runs: 0,
        timed_runs: 30,
        ..Default::default()
    };
    let c = model(ModelFamily::CentroidNet, Scale::S, 16);
    assert_eq!(bench_latency(Runnable::Graph(&c), &runs).unwrap().samples_us.len(), 30);
}
