use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use voxquant::calib::{calibrate_graph, CalibMethod, CalibrationTable};
use voxquant::engine::{build_engine, deserialize_engine, serialize_engine, EnginePlan};
use voxquant::graph::{validate_and_infer_shapes, Graph};
use voxquant::kernels::Volume;
use voxquant::qdq::{insert_qdq, QdqPolicy};
use voxquant_bench::data::{gen_synthetic_dataset, Dataset, DatasetConfig};
use voxquant_bench::eval::{evaluate_dice, Runnable, Runner};
use voxquant_bench::latency::{bench_latency, BenchConfig, Statistic};
use voxquant_bench::pipeline::{run_pipeline, Artifacts, PipelineConfig};
use voxquant_bench::report::compare_report;
use voxquant_bench::sweep::{scaling_sweep, SweepConfig};
use voxquant_bench::zoo::{gen_model, ModelConfig, ModelFamily, Scale};
use voxquant_bench::{io, BenchError};

#[derive(Parser)]
#[command(
    name = "voxquant",
    version,
    about = "Post-training INT8 quantization for 3D segmentation networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Spatial shape `D,H,W` (or a single side).
        #[arg(long, default_value = "32", value_parser = parse_shape)]
        shape: [usize; 3],
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
    },
    /// Generate a model (document plus `.bin` weight blob).
    GenModel {
        #[arg(long)]
        family: ModelFamily,
        #[arg(long, default_value = "S")]
        scale: Scale,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value = "32", value_parser = parse_shape)]
        shape: [usize; 3],
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate a model on a dataset and write the calibration table.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        quant: QuantArgs,
    },
    /// Insert Quantize/Dequantize pairs using a calibration table.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        bits: u8,
        #[arg(long, default_value = "Conv3D")]
        policy: String,
    },
    /// Compile a fake-quantized model into an INT8 engine file.
    Build {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate, quantize and build in one go, writing every artifact and a manifest.
    Pipeline {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        quant: QuantArgs,
    },
    /// Run a model or engine on every volume of a dataset and write label volumes.
    Run {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Measure execute-call latency.
    Bench {
        #[command(flatten)]
        target: Target,
        #[command(flatten)]
        bench: BenchArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean Dice of a model or engine against dataset labels.
    EvalDice {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FP32 vs fake-quant vs INT8 report over pipeline output directories.
    Compare {
        /// A directory written by `pipeline`; repeat for several models.
        #[arg(long = "pipeline", required = true)]
        pipelines: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        bench: BenchArgs,
    },
    /// Run the pipeline over several model scales and compare compression ratios.
    Sweep {
        #[arg(long, default_value = "toy-unet")]
        family: ModelFamily,
        #[arg(long, default_value = "S,M,L", value_delimiter = ',')]
        scales: Vec<Scale>,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value = "16", value_parser = parse_shape)]
        shape: [usize; 3],
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Calibration dataset; by default 4 synthetic volumes are generated.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        quant: QuantArgs,
        #[command(flatten)]
        bench: BenchArgs,
        /// Skip latency measurement.
        #[arg(long)]
        no_latency: bool,
    },
    /// Print the structure of a model or engine.
    Inspect {
        #[command(flatten)]
        target: Target,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Target {
    /// FP32 or fake-quantized model document.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Engine file.
    #[arg(long)]
    engine: Option<PathBuf>,
}

#[derive(Args)]
struct QuantArgs {
    #[arg(long, default_value_t = 8)]
    bits: u8,
    /// Comma-separated op kinds to quantize, or `none`.
    #[arg(long, default_value = "Conv3D")]
    policy: String,
    #[arg(long, value_enum, default_value_t = MethodArg::Minmax)]
    calib_method: MethodArg,
    #[arg(long, default_value_t = 99.99)]
    percentile: f64,
    /// Use only the first N dataset volumes for calibration.
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Minmax,
    Percentile,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long, default_value_t = 30)]
    runs: usize,
    #[arg(long = "bench-seed", default_value_t = 0)]
    bench_seed: u64,
    #[arg(long, default_value = "median")]
    statistic: Statistic,
}

impl BenchArgs {
    fn config(&self) -> BenchConfig {
        BenchConfig {
            warmup_runs: self.warmup,
            timed_runs: self.runs,
            statistic: self.statistic,
            input_shape: None,
            threads: self.threads,
            seed: self.bench_seed,
        }
    }
}

impl QuantArgs {
    fn policy(&self) -> Result<QdqPolicy, BenchError> {
        QdqPolicy::from_kind_list(&self.policy, self.bits).map_err(BenchError::InvalidConfig)
    }

    fn method(&self) -> CalibMethod {
        match self.calib_method {
            MethodArg::Minmax => CalibMethod::MinMax,
            MethodArg::Percentile => CalibMethod::Percentile(self.percentile),
        }
    }

    fn volumes(&self, ds: Dataset) -> Vec<Volume> {
        let mut v = ds.volumes;
        if let Some(n) = self.count {
            v.truncate(n);
        }
        v
    }
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let dims = s
        .split(',')
        .map(|d| {
            d.trim()
                .parse::<usize>()
                .map_err(|e| format!("bad dimension `{d}`: {e}"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    match dims[..] {
        [n] => Ok([n; 3]),
        [d, h, w] => Ok([d, h, w]),
        _ => Err(format!("expected `D,H,W` or a single side, got `{s}`")),
    }
}

enum Loaded {
    Model(Graph),
    Engine(EnginePlan),
}

impl Loaded {
    fn load(t: &Target) -> Result<Self, BenchError> {
        match (&t.model, &t.engine) {
            (Some(m), _) => Ok(Loaded::Model(io::load_model(m)?)),
            (None, Some(e)) => Ok(Loaded::Engine(deserialize_engine(&io::read(e)?)?)),
            (None, None) => Err(BenchError::InvalidConfig(
                "one of --model or --engine is required".into(),
            )),
        }
    }

    fn runnable(&self) -> Runnable<'_> {
        match self {
            Loaded::Model(g) => Runnable::Graph(g),
            Loaded::Engine(p) => Runnable::Engine(p),
        }
    }
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_json(v: &impl serde::Serialize) {
    emit(&(serde_json::to_string_pretty(v).expect("serializable") + "\n"));
}

fn dataset_seeds(ds: &Dataset) -> BTreeMap<String, u64> {
    BTreeMap::from([("data".to_string(), ds.config.seed)])
}

fn run(cli: Cli) -> Result<ExitCode, BenchError> {
    match cli.command {
        Command::GenData {
            out,
            seed,
            count,
            shape,
            classes,
            noise,
        } => {
            let cfg = DatasetConfig {
                seed,
                count,
                shape,
                classes,
                noise,
            };
            let m = gen_synthetic_dataset(&cfg, &out)?;
            print_json(&json!({ "dir": out, "samples": m.samples.len(), "config": m.config }));
        }
        Command::GenModel {
            family,
            scale,
            classes,
            shape,
            seed,
            out,
        } => {
            let cfg = ModelConfig {
                family,
                scale,
                classes,
                spatial: shape,
                seed,
            };
            let g = gen_model(&cfg)?;
            let bytes = io::save_model(&out, &g)?;
            print_json(&json!({
                "model": out,
                "name": g.name,
                "config": cfg,
                "nodes": g.nodes.len(),
                "params": g.param_count(),
                "bytes": bytes,
                "weights_sha256": io::sha256_hex(&g.blob),
            }));
        }
        Command::Calibrate {
            model,
            data,
            out,
            quant,
        } => {
            let g = io::load_model(&model)?;
            let vols = quant.volumes(Dataset::load(&data)?);
            let table = calibrate_graph(&g, &vols, &quant.policy()?, quant.method())?;
            io::write(&out, table.to_json().as_bytes())?;
            print_json(&json!({ "table": out, "tensors": table.len(), "volumes": vols.len() }));
        }
        Command::Quantize {
            model,
            calib,
            out,
            bits,
            policy,
        } => {
            let g = io::load_model(&model)?;
            let text = io::read(&calib)?;
            let table = CalibrationTable::from_json(&String::from_utf8_lossy(&text))?;
            let policy = QdqPolicy::from_kind_list(&policy, bits).map_err(BenchError::InvalidConfig)?;
            let fake = insert_qdq(&g, &table, &policy)?;
            let bytes = io::save_model(&out, &fake)?;
            print_json(&json!({ "model": out, "nodes": fake.nodes.len(), "bytes": bytes }));
        }
        Command::Build { model, out } => {
            let g = io::load_model(&model)?;
            let plan = build_engine(&g)?;
            let bytes = serialize_engine(&plan);
            io::write(&out, &bytes)?;
            print_json(&json!({
                "engine": out,
                "bytes": bytes.len(),
                "ops": plan.ops.len(),
                "fp32_fallback": plan.has_fallback(),
                "workspace_bytes": plan.workspace_bytes,
                "sha256": io::sha256_hex(&bytes),
            }));
        }
        Command::Pipeline {
            model,
            data,
            out,
            quant,
        } => {
            let g = io::load_model(&model)?;
            let ds = Dataset::load(&data)?;
            let cfg = PipelineConfig {
                policy: quant.policy()?,
                method: quant.method(),
                seeds: dataset_seeds(&ds),
            };
            let vols = quant.volumes(ds);
            let res = run_pipeline(&g, &vols, &cfg, &out)?;
            print_json(&res.manifest);
        }
        Command::Run {
            target,
            data,
            out,
            threads,
        } => {
            let loaded = Loaded::load(&target)?;
            let ds = Dataset::load(&data)?;
            let mut runner = Runner::new(loaded.runnable(), threads)?;
            io::create_dir(&out)?;
            for (i, v) in ds.volumes.iter().enumerate() {
                runner.predict(v)?.save(&out.join(format!("pred_{i:04}.raw")))?;
            }
            print_json(&json!({ "predictions": ds.len(), "dir": out }));
        }
        Command::Bench { target, bench, out } => {
            let loaded = Loaded::load(&target)?;
            let stats = bench_latency(loaded.runnable(), &bench.config())?;
            if let Some(p) = out {
                io::write_json(&p, &stats)?;
            }
            print_json(&stats);
        }
        Command::EvalDice {
            target,
            data,
            threads,
            out,
        } => {
            let loaded = Loaded::load(&target)?;
            let ds = Dataset::load(&data)?;
            let summary = evaluate_dice(loaded.runnable(), &ds, threads)?;
            if let Some(p) = out {
                io::write_json(&p, &summary)?;
            }
            print_json(&summary);
        }
        Command::Compare {
            pipelines,
            data,
            out,
            bench,
        } => {
            let ds = Dataset::load(&data)?;
            let arts = pipelines
                .iter()
                .map(|d| Artifacts::load(d))
                .collect::<Result<Vec<_>, _>>()?;
            let report = compare_report(&arts, &ds, &bench.config())?;
            report.write(&out)?;
            emit(&report.to_table());
        }
        Command::Sweep {
            family,
            scales,
            classes,
            shape,
            seed,
            data,
            out,
            quant,
            bench,
            no_latency,
        } => {
            let ds = match &data {
                Some(d) => Dataset::load(d)?,
                None => Dataset::generate(DatasetConfig {
                    seed,
                    count: 4,
                    shape,
                    classes,
                    noise: 0.01,
                })?,
            };
            let cfg = SweepConfig {
                family,
                scales,
                classes,
                spatial: shape,
                seed,
                pipeline: PipelineConfig {
                    policy: quant.policy()?,
                    method: quant.method(),
                    seeds: BTreeMap::from([("model".to_string(), seed), ("data".to_string(), ds.config.seed)]),
                },
                bench: (!no_latency).then(|| bench.config()),
            };
            let vols = quant.volumes(ds);
            let dir = out.with_extension("d");
            let report = scaling_sweep(&cfg, &vols, &dir)?;
            report.write(&out)?;
            emit(&report.to_table());
            if !report.ratio_non_decreasing {
                eprintln!("warning: compression ratio decreases with parameter count");
                return Ok(ExitCode::from(1));
            }
        }
        Command::Inspect { target } => match Loaded::load(&target)? {
            Loaded::Model(g) => emit(&inspect_model(&g)?),
            Loaded::Engine(p) => emit(&inspect_engine(&p, target.engine.as_deref())),
        },
    }
    Ok(ExitCode::SUCCESS)
}

fn inspect_model(g: &Graph) -> Result<String, BenchError> {
    let mut s = String::new();
    let typed = validate_and_infer_shapes(g, 1)?;
    writeln!(
        s,
        "model {}  ({} nodes, {} params, {} weight bytes)",
        g.name,
        g.nodes.len(),
        g.param_count(),
        g.blob.len()
    )
    .unwrap();
    for t in &g.inputs {
        writeln!(s, "  input  {} {:?}", t.name, typed.info(&t.name).map(|i| i.shape5())).unwrap();
    }
    for &i in &typed.order {
        let n = &g.nodes[i];
        let shape = n.outputs.first().and_then(|o| typed.info(o)).map(|i| i.shape5());
        writeln!(
            s,
            "  {:<14} {:<12} {} -> {} {:?}",
            n.id,
            n.op.kind().as_str(),
            n.inputs.join(", "),
            n.outputs.join(", "),
            shape.unwrap_or_default()
        )
        .unwrap();
    }
    for t in &g.outputs {
        writeln!(s, "  output {}", t.name).unwrap();
    }
    Ok(s)
}

fn inspect_engine(p: &EnginePlan, path: Option<&Path>) -> String {
    let mut s = String::new();
    if let Some(path) = path {
        writeln!(s, "engine {}", path.display()).unwrap();
    }
    let (name, batch, ops, tensors) = (&p.name, p.batch, p.ops.len(), p.tensors.len());
    let (params, weights, biases) = (p.params.len(), p.weights.len(), p.biases.len());
    writeln!(
        s,
        "plan {name}  (batch {batch}, {ops} ops, {tensors} tensors, {params} param sets, {weights} weight bytes, \
         {biases} biases, workspace {} bytes, fp32 fallback: {})",
        p.workspace_bytes,
        p.has_fallback()
    )
    .unwrap();
    let name = |t: usize| {
        let t = &p.tensors[t];
        format!("{}:{}{:?}", t.name, t.dtype.as_str(), t.shape)
    };
    for op in &p.ops {
        let ins: Vec<String> = op.inputs().into_iter().map(name).collect();
        writeln!(
            s,
            "  {:<18} {} -> {}",
            op.kind_name(),
            ins.join(", "),
            name(op.output())
        )
        .unwrap();
    }
    s
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
