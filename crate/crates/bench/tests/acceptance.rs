//! The nine acceptance criteria, run in order with one PASS/FAIL line each.
//!
//! `cargo test -p voxquant-bench --test acceptance` (plain `main`, no harness,
//! so the lines are printed without `--nocapture`).

#[path = "../../core/tests/common/exact.rs"]
mod exact;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use exact::{exact_params, exact_quantize, rat, rel_diff};
use num_traits::Signed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxquant::calib::{calibrate_graph, dequantize_scalar, params_for_range, quantize_scalar, CalibMethod};
use voxquant::engine::{build_engine, deserialize_engine, engine_size_report, serialize_engine, EngineError};
use voxquant::graph::{parse_model, serialize_model, validate_and_infer_shapes};
use voxquant::kernels::{execute_int8_engine, execute_integer_oracle};
use voxquant::qdq::{code_agreement, insert_qdq, AgreementMode, CodeAgreement};
use voxquant_bench::data::{Dataset, DatasetConfig};
use voxquant_bench::eval::{evaluate_dice, Runnable, Runner};
use voxquant_bench::latency::{bench_latency, BenchConfig};
use voxquant_bench::pipeline::{run_pipeline, PipelineConfig};
use voxquant_bench::sweep::{scaling_sweep, SweepConfig};
use voxquant_bench::zoo::{gen_model, random_fixture, Fixture, ModelConfig, ModelFamily, Scale};

const FIXTURES: u64 = 120;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(t: Instant, limit: Duration) -> Result<Duration, String> {
    let e = t.elapsed();
    ensure(e < limit, || format!("took {e:?}, limit {limit:?}"))?;
    Ok(e)
}

fn toy_unet(scale: Scale, side: usize) -> voxquant::graph::Graph {
    gen_model(&ModelConfig {
        family: ModelFamily::ToyUnet,
        scale,
        classes: 4,
        spatial: [side; 3],
        seed: 0,
    })
    .unwrap()
}

fn dataset(seed: u64, count: usize, side: usize) -> Dataset {
    Dataset::generate(DatasetConfig {
        seed,
        count,
        shape: [side; 3],
        classes: 4,
        noise: 0.01,
    })
    .unwrap()
}

fn compile(f: &Fixture) -> (voxquant::graph::Graph, voxquant::engine::EnginePlan) {
    let table = calibrate_graph(&f.graph, &f.calib, &f.policy, CalibMethod::MinMax).unwrap();
    let fake = insert_qdq(&f.graph, &table, &f.policy).unwrap();
    let plan = build_engine(&fake).unwrap();
    (fake, plan)
}

fn c1_formula_oracle() -> Outcome {
    let t = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let endpoint = |r: &mut ChaCha8Rng| {
        let m = 10f64.powf(r.random_range(-4.0..3.0));
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    };
    let mut worst_scale = 0f64;
    for _ in 0..10_000 {
        let (a, b) = (endpoint(&mut r), endpoint(&mut r));
        let (min, max) = (a.min(b), a.max(b));
        let bits = r.random_range(2..=8u8);
        let (lo, hi) = (min.min(0.0), max.max(0.0));
        let span = hi - lo;
        let x = r.random_range(lo - span / 4.0..hi + span / 4.0);

        let p = params_for_range(min, max, bits).map_err(|e| e.to_string())?;
        let (s, z) = exact_params(min, max, bits);
        let rel = rel_diff(p.scale, &s);
        worst_scale = worst_scale.max(rel);
        ensure(rel <= 1e-12, || {
            format!("scale for [{min}, {max}] k={bits}: rel {rel:e}")
        })?;
        ensure(p.zero_point as i64 == z, || {
            format!("zero point for [{min}, {max}] k={bits}")
        })?;
        let q = quantize_scalar(x, &p);
        ensure(q as i64 == exact_quantize(x, &s, z, bits), || {
            format!("code for {x} in [{min}, {max}] k={bits}")
        })?;
        let back = dequantize_scalar(q, &p).unwrap();
        let exact_back = (rat(q as f64) - rat(z as f64)) * &s;
        let abs = (rat(back) - exact_back).abs();
        ensure(abs <= rat(1e-12) * rat(p.scale * p.qmax() as f64), || {
            format!("dequantize {q}")
        })?;
        if (lo..=hi).contains(&x) {
            // The 1e-12 slack covers the rounding of s itself.
            ensure((back - x).abs() <= p.scale / 2.0 * (1.0 + 1e-12), || {
                format!("round trip of {x}")
            })?;
        }
    }
    let e = within(t, Duration::from_secs(5))?;
    Ok(format!(
        "10000 triples, worst scale rel error {worst_scale:.1e}, {e:.2?}"
    ))
}

fn c2_bit_exact() -> Outcome {
    let t = Instant::now();
    let mut elements = 0usize;
    for seed in 0..FIXTURES {
        let f = random_fixture(seed);
        let (_, plan) = compile(&f);
        let a = execute_int8_engine(&plan, &f.input).map_err(|e| e.to_string())?;
        let b = execute_integer_oracle(&plan, &f.input).map_err(|e| e.to_string())?;
        for (x, y) in a.iter().zip(&b) {
            elements += x.data.len();
            ensure(x.shape == y.shape, || format!("fixture {seed}: shapes differ"))?;
            let same = x.data.iter().zip(&y.data).all(|(p, q)| p.to_bits() == q.to_bits());
            ensure(same, || format!("fixture {seed}: engine and oracle differ"))?;
        }
    }
    let e = within(t, Duration::from_secs(120))?;
    Ok(format!(
        "{FIXTURES} plans, {elements} output elements identical, {e:.2?}"
    ))
}

fn c3_fake_vs_real() -> Outcome {
    let (mut per_op, mut end_to_end) = (CodeAgreement::default(), CodeAgreement::default());
    for seed in 0..FIXTURES {
        let f = random_fixture(seed);
        let (fake, plan) = compile(&f);
        let agree = |m| code_agreement(&fake, &plan, &f.input, m).map_err(|e| e.to_string());
        per_op = per_op.merge(&agree(AgreementMode::PerOp)?);
        end_to_end = end_to_end.merge(&agree(AgreementMode::EndToEnd)?);
    }
    let frac = per_op.fraction_differing();
    ensure(frac <= 1e-3 && per_op.max_abs_diff <= 1, || {
        format!("per-op {per_op:?}")
    })?;
    Ok(format!(
        "per-op {}/{} codes differ ({:.4}%), max {}; end-to-end {:.4}%, max {}",
        per_op.differing,
        per_op.compared,
        100.0 * frac,
        per_op.max_abs_diff,
        100.0 * end_to_end.fraction_differing(),
        end_to_end.max_abs_diff
    ))
}

fn c4_accuracy() -> Outcome {
    let t = Instant::now();
    let side = 64;
    let g = gen_model(&ModelConfig {
        family: ModelFamily::CentroidNet,
        scale: Scale::S,
        classes: 4,
        spatial: [side; 3],
        seed: 0,
    })
    .unwrap();
    let eval = dataset(100, 20, side);
    let calib = dataset(200, 8, side).volumes;
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(&g, &calib, &PipelineConfig::default(), dir.path()).map_err(|e| e.to_string())?;
    let fp32 = evaluate_dice(Runnable::Graph(&g), &eval, 1)
        .map_err(|e| e.to_string())?
        .mean;
    let int8 = evaluate_dice(Runnable::Engine(&out.plan), &eval, 1)
        .map_err(|e| e.to_string())?
        .mean;
    let drop = fp32 - int8;
    ensure(fp32 >= 0.99, || format!("FP32 mDSC {fp32:.4}"))?;
    ensure(drop.abs() <= 0.01, || format!("mDSC {fp32:.4} -> {int8:.4}"))?;
    let e = within(t, Duration::from_secs(120))?;
    Ok(format!(
        "mDSC fp32 {fp32:.4}, int8 {int8:.4}, delta {drop:+.4}, {e:.2?}"
    ))
}

fn c5_compression() -> Outcome {
    let g = toy_unet(Scale::M, 16);
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(&g, &dataset(1, 2, 16).volumes, &PipelineConfig::default(), dir.path())
        .map_err(|e| e.to_string())?;
    let report = engine_size_report(&g, &out.engine).map_err(|e| e.to_string())?;
    let ratio = report.compression_ratio;
    ensure((2.4..=4.0).contains(&ratio), || format!("engine ratio {ratio:.3}"))?;
    let (doc, blob) = serialize_model(&g);
    let (fake_doc, fake_blob) = serialize_model(&out.fake);
    ensure(fake_blob == blob, || "fake-quant weight blob differs from FP32".into())?;
    let fake_ratio = (doc.len() + blob.len()) as f64 / (fake_doc.len() + fake_blob.len()) as f64;
    ensure((fake_ratio - 1.0).abs() <= 0.01, || {
        format!("fake ratio {fake_ratio:.4}")
    })?;
    Ok(format!(
        "engine {:.3}x ({} -> {} bytes); fake {fake_ratio:.4}x (doc overhead {} bytes)",
        ratio,
        report.fp32_bytes,
        report.engine_bytes,
        fake_doc.len() as i64 - doc.len() as i64
    ))
}

fn c6_scaling() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SweepConfig {
        family: ModelFamily::ToyUnet,
        scales: vec![Scale::S, Scale::M, Scale::L],
        classes: 4,
        spatial: [16; 3],
        seed: 0,
        pipeline: PipelineConfig::default(),
        bench: None,
    };
    let r = scaling_sweep(&cfg, &dataset(1, 2, 16).volumes, dir.path()).map_err(|e| e.to_string())?;
    let line: Vec<String> = r
        .rows
        .iter()
        .map(|row| format!("{} {} params {:.4}x", row.scale, row.params, row.ratio))
        .collect();
    let monotone = r
        .rows
        .windows(2)
        .all(|w| w[0].params < w[1].params && w[0].ratio <= w[1].ratio);
    ensure(monotone && r.ratio_non_decreasing, || line.join(", "))?;
    Ok(line.join(", "))
}

fn c7_latency() -> Outcome {
    let side = 64;
    let g = toy_unet(Scale::M, side);
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(&g, &dataset(1, 2, side).volumes, &PipelineConfig::default(), dir.path())
        .map_err(|e| e.to_string())?;
    let cfg = BenchConfig::default();
    ensure(cfg.timed_runs == 30 && cfg.threads == 1, || format!("{cfg:?}"))?;
    let fp32 = bench_latency(Runnable::Graph(&g), &cfg).map_err(|e| e.to_string())?;
    let int8 = bench_latency(Runnable::Engine(&out.plan), &cfg).map_err(|e| e.to_string())?;
    ensure(fp32.samples_us.len() == 30 && int8.samples_us.len() == 30, || {
        "sample count".into()
    })?;
    let speedup = fp32.median_us / int8.median_us;
    let msg = format!(
        "median fp32 {:.1} ms, int8 {:.1} ms, speedup {speedup:.2}x",
        fp32.median_us / 1e3,
        int8.median_us / 1e3
    );
    ensure(int8.median_us < fp32.median_us, || msg.clone())?;
    Ok(msg)
}

fn cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_voxquant"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(o.status.success(), || {
        format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr))
    })
}

fn c8_determinism() -> Outcome {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    cli(
        d,
        &[
            "gen-data", "--out", "data", "--seed", "5", "--count", "2", "--shape", "16",
        ],
    )?;
    let mut engines = Vec::new();
    for run in ["a", "b"] {
        let p = |f: &str| format!("{run}/{f}");
        cli(
            d,
            &[
                "gen-model",
                "--family",
                "toy-unet",
                "--scale",
                "S",
                "--shape",
                "16",
                "--seed",
                "3",
                "--out",
                &p("m.json"),
            ],
        )?;
        cli(
            d,
            &[
                "calibrate",
                "--model",
                &p("m.json"),
                "--data",
                "data",
                "--out",
                &p("calib.json"),
            ],
        )?;
        cli(
            d,
            &[
                "quantize",
                "--model",
                &p("m.json"),
                "--calib",
                &p("calib.json"),
                "--out",
                &p("fake.json"),
            ],
        )?;
        cli(d, &["build", "--model", &p("fake.json"), "--out", &p("engine.vqe")])?;
        engines.push(std::fs::read(d.join(p("engine.vqe"))).map_err(|e| e.to_string())?);
    }
    ensure(engines[0] == engines[1], || "engine bytes differ between runs".into())?;

    let plan = deserialize_engine(&engines[0]).map_err(|e| e.to_string())?;
    let data = Dataset::load(&d.join("data")).map_err(|e| e.to_string())?;
    let mut one = Runner::new(Runnable::Engine(&plan), 1).map_err(|e| e.to_string())?;
    let mut many = Runner::new(Runnable::Engine(&plan), 4).map_err(|e| e.to_string())?;
    for v in &data.volumes {
        let (a, b) = (
            one.run(v).map_err(|e| e.to_string())?,
            many.run(v).map_err(|e| e.to_string())?,
        );
        ensure(a == b, || "outputs differ between 1 and 4 threads".into())?;
    }
    Ok(format!(
        "{} engine bytes identical; 1 vs 4 threads identical",
        engines[0].len()
    ))
}

fn mutate(r: &mut ChaCha8Rng, doc: &[u8]) -> Vec<u8> {
    let mut d = doc.to_vec();
    for _ in 0..r.random_range(1..=4) {
        match r.random_range(0..4) {
            0 if !d.is_empty() => {
                let i = r.random_range(0..d.len());
                d[i] ^= 1 << r.random_range(0..8);
            }
            1 => d.truncate(r.random_range(0..=d.len())),
            2 => {
                let i = r.random_range(0..=d.len());
                d.insert(i, b"{}[]\":,0-eE9 x"[r.random_range(0..14)]);
            }
            _ if !d.is_empty() => {
                d.remove(r.random_range(0..d.len()));
            }
            _ => {}
        }
    }
    d
}

fn c9_robustness() -> Outcome {
    let f = random_fixture(7);
    let (fake, plan) = compile(&f);
    let bytes = serialize_engine(&plan);
    let sections = engine_size_report(&f.graph, &bytes)
        .map_err(|e| e.to_string())?
        .sections;

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"ONNX");
    ensure(deserialize_engine(&bad) == Err(EngineError::BadMagic), || {
        "bad magic".into()
    })?;
    for cut in 0..bytes.len() {
        let r = deserialize_engine(&bytes[..cut]);
        ensure(r == Err(EngineError::TruncatedFile), || format!("cut at {cut}: {r:?}"))?;
    }
    let weights = (sections.header + sections.plan + sections.params + 8) as usize;
    let weights_end = weights + plan.weights.len();
    let mut flips = 0;
    for pos in 0..bytes.len() {
        for bit in 0..8 {
            let mut m = bytes.clone();
            m[pos] ^= 1 << bit;
            let r = deserialize_engine(&m);
            let ok = match &r {
                Err(EngineError::BadMagic) => pos < 4,
                Err(EngineError::UnsupportedVersion(_)) => pos == 4,
                Err(EngineError::ChecksumMismatch { .. }) => pos > 4,
                // A flipped length field can make the body end early.
                Err(EngineError::TruncatedFile) => pos > 4 && !(weights..weights_end).contains(&pos),
                _ => false,
            };
            ensure(ok, || format!("flip {pos}:{bit} gave {r:?}"))?;
            flips += 1;
        }
    }

    let (doc, blob) = serialize_model(&fake);
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let mut rejected = 0;
    for i in 0..1000 {
        let m = mutate(&mut r, &doc);
        let parsed = catch_unwind(AssertUnwindSafe(|| match parse_model(&m, &blob) {
            Ok(g) => validate_and_infer_shapes(&g, 1).is_err(),
            Err(e) => !e.to_string().is_empty(),
        }))
        .map_err(|_| format!("mutated document {i} panicked"))?;
        rejected += parsed as usize;
    }
    Ok(format!(
        "{} truncations and {flips} bit flips classified; 1000 mutated documents, {rejected} rejected, no panics",
        bytes.len()
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 quantization formula oracle", c1_formula_oracle),
        ("2 bit-exact engine semantics", c2_bit_exact),
        ("3 fake-vs-real closeness", c3_fake_vs_real),
        ("4 accuracy preservation", c4_accuracy),
        ("5 compression ratio", c5_compression),
        ("6 scaling monotonicity", c6_scaling),
        ("7 latency direction", c7_latency),
        ("8 determinism", c8_determinism),
        ("9 format robustness", c9_robustness),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        let result = catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                println!("FAIL  {name}: {why}");
                failed.push(name);
            }
        }
    }
    if !failed.is_empty() {
        println!("acceptance: {} of 9 criteria failed", failed.len());
        std::process::exit(1);
    }
    println!("acceptance: all 9 criteria passed");
}
