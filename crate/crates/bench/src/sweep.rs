//! Model-scale sweep: compression ratio and latency against parameter count.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use voxquant::engine::{deserialize_engine, engine_size_report};
use voxquant::kernels::Volume;

use crate::eval::Runnable;
use crate::latency::{bench_latency, BenchConfig};
use crate::pipeline::{run_pipeline, PipelineConfig};
use crate::zoo::{gen_model, ModelConfig, ModelFamily, Scale};
use crate::{io, BenchError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scale: Scale,
    pub params: u64,
    pub fp32_bytes: u64,
    pub int8_bytes: u64,
    pub ratio: f64,
    pub fp32_latency_us: Option<f64>,
    pub int8_latency_us: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub family: ModelFamily,
    pub rows: Vec<SweepRow>,
    /// Whether the compression ratio never decreases as parameters grow.
    pub ratio_non_decreasing: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub family: ModelFamily,
    pub scales: Vec<Scale>,
    pub classes: usize,
    pub spatial: [usize; 3],
    pub seed: u64,
    pub pipeline: PipelineConfig,
    /// `None` skips latency measurement.
    pub bench: Option<BenchConfig>,
}

/// Runs the pipeline once per scale, each into `outdir/<scale>`.
pub fn scaling_sweep(cfg: &SweepConfig, calib: &[Volume], outdir: &Path) -> Result<SweepReport, BenchError> {
    if cfg.scales.len() < 2 {
        return Err(BenchError::InvalidConfig(format!(
            "a sweep needs at least 2 scales, got {}",
            cfg.scales.len()
        )));
    }
    let mut rows = Vec::with_capacity(cfg.scales.len());
    for &scale in &cfg.scales {
        let model = gen_model(&ModelConfig {
            family: cfg.family,
            scale,
            classes: cfg.classes,
            spatial: cfg.spatial,
            seed: cfg.seed,
        })?;
        let out = run_pipeline(&model, calib, &cfg.pipeline, &outdir.join(scale.to_string()))?;
        let size = engine_size_report(&model, &out.engine)?;
        let (fp32_latency_us, int8_latency_us) = match &cfg.bench {
            Some(b) => {
                let plan = deserialize_engine(&out.engine)?;
                (
                    Some(bench_latency(Runnable::Graph(&model), b)?.value_us),
                    Some(bench_latency(Runnable::Engine(&plan), b)?.value_us),
                )
            }
            None => (None, None),
        };
        rows.push(SweepRow {
            scale,
            params: model.param_count() as u64,
            fp32_bytes: size.fp32_bytes,
            int8_bytes: size.engine_bytes,
            ratio: size.compression_ratio,
            fp32_latency_us,
            int8_latency_us,
        });
    }
    let mut by_params: Vec<&SweepRow> = rows.iter().collect();
    by_params.sort_by_key(|r| r.params);
    let ratio_non_decreasing = by_params.windows(2).all(|w| w[1].ratio >= w[0].ratio);
    Ok(SweepReport {
        family: cfg.family,
        rows,
        ratio_non_decreasing,
    })
}

impl SweepReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "{:<6} {:>12} {:>10} {:>10} {:>7} {:>10} {:>10}",
            "scale", "params", "FP32 MB", "INT8 MB", "ratio", "FP32 ms", "INT8 ms"
        )
        .unwrap();
        let ms = |v: Option<f64>| v.map_or("-".to_string(), |us| format!("{:.3}", us / 1e3));
        for r in &self.rows {
            writeln!(
                s,
                "{:<6} {:>12} {:>10.3} {:>10.3} {:>6.3}x {:>10} {:>10}",
                r.scale.to_string(),
                r.params,
                r.fp32_bytes as f64 / 1e6,
                r.int8_bytes as f64 / 1e6,
                r.ratio,
                ms(r.fp32_latency_us),
                ms(r.int8_latency_us)
            )
            .unwrap();
        }
        writeln!(
            s,
            "ratio non-decreasing in parameter count: {}",
            self.ratio_non_decreasing
        )
        .unwrap();
        s
    }

    pub fn write(&self, path: &Path) -> Result<(), BenchError> {
        io::write_json(path, self)?;
        io::write(&path.with_extension("txt"), self.to_table().as_bytes())
    }
}
