//! FP32 vs fake-quant vs INT8 comparison rows: size, latency, workspace and mDSC.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use voxquant::engine::{deserialize_engine, engine_size_report, SectionSizes};
use voxquant::graph::serialize_model;

use crate::data::Dataset;
use crate::eval::{evaluate_dice, Runnable};
use crate::latency::{bench_latency, BenchConfig};
use crate::pipeline::Artifacts;
use crate::{io, BenchError};

/// Sizes in bytes, latencies in microseconds. Ratios are FP32 over the other column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub model: String,
    pub params: u64,
    pub fp32_bytes: u64,
    pub fake_bytes: u64,
    pub int8_bytes: u64,
    pub fp32_weight_bytes: u64,
    pub fake_weight_bytes: u64,
    pub size_ratio: f64,
    pub fake_size_ratio: f64,
    pub fp32_latency_us: f64,
    pub fake_latency_us: f64,
    pub int8_latency_us: f64,
    pub latency_ratio: f64,
    pub fake_latency_ratio: f64,
    pub fp32_mdsc: f64,
    pub fake_mdsc: f64,
    pub int8_mdsc: f64,
    pub fp32_workspace_bytes: u64,
    pub int8_workspace_bytes: u64,
    pub engine_sections: SectionSizes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub bench: BenchConfig,
    pub rows: Vec<CompareRow>,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        f64::INFINITY
    }
}

pub fn compare_row(a: &Artifacts, data: &Dataset, cfg: &BenchConfig) -> Result<CompareRow, BenchError> {
    let plan = deserialize_engine(&a.engine)?;
    let size = engine_size_report(&a.fp32, &a.engine)?;
    let (fake_doc, fake_blob) = serialize_model(&a.fake);
    let fake_bytes = (fake_doc.len() + fake_blob.len()) as u64;

    let fp32_lat = bench_latency(Runnable::Graph(&a.fp32), cfg)?.value_us;
    let fake_lat = bench_latency(Runnable::Graph(&a.fake), cfg)?.value_us;
    let int8_lat = bench_latency(Runnable::Engine(&plan), cfg)?.value_us;

    Ok(CompareRow {
        model: a.name().to_string(),
        params: a.fp32.param_count() as u64,
        fp32_bytes: size.fp32_bytes,
        fake_bytes,
        int8_bytes: size.engine_bytes,
        fp32_weight_bytes: a.fp32.blob.len() as u64,
        fake_weight_bytes: fake_blob.len() as u64,
        size_ratio: ratio(size.fp32_bytes as f64, size.engine_bytes as f64),
        fake_size_ratio: ratio(size.fp32_bytes as f64, fake_bytes as f64),
        fp32_latency_us: fp32_lat,
        fake_latency_us: fake_lat,
        int8_latency_us: int8_lat,
        latency_ratio: ratio(fp32_lat, int8_lat),
        fake_latency_ratio: ratio(fp32_lat, fake_lat),
        fp32_mdsc: evaluate_dice(Runnable::Graph(&a.fp32), data, cfg.threads)?.mean,
        fake_mdsc: evaluate_dice(Runnable::Graph(&a.fake), data, cfg.threads)?.mean,
        int8_mdsc: evaluate_dice(Runnable::Engine(&plan), data, cfg.threads)?.mean,
        fp32_workspace_bytes: size.fp32_workspace_bytes,
        int8_workspace_bytes: size.int8_workspace_bytes,
        engine_sections: size.sections,
    })
}

pub fn compare_report(models: &[Artifacts], data: &Dataset, cfg: &BenchConfig) -> Result<CompareReport, BenchError> {
    cfg.validate()?;
    let rows = models
        .iter()
        .map(|a| compare_row(a, data, cfg))
        .collect::<Result<_, _>>()?;
    Ok(CompareReport { bench: *cfg, rows })
}

impl CompareReport {
    /// Recomputes every ratio from the row's own raw columns.
    pub fn check_consistency(&self) -> Result<(), String> {
        let close = |a: f64, b: f64| a == b || (a - b).abs() <= 1e-12 * a.abs().max(b.abs());
        for r in &self.rows {
            let checks = [
                (
                    "size_ratio",
                    r.size_ratio,
                    ratio(r.fp32_bytes as f64, r.int8_bytes as f64),
                ),
                (
                    "fake_size_ratio",
                    r.fake_size_ratio,
                    ratio(r.fp32_bytes as f64, r.fake_bytes as f64),
                ),
                (
                    "latency_ratio",
                    r.latency_ratio,
                    ratio(r.fp32_latency_us, r.int8_latency_us),
                ),
                (
                    "fake_latency_ratio",
                    r.fake_latency_ratio,
                    ratio(r.fp32_latency_us, r.fake_latency_us),
                ),
            ];
            for (name, stored, recomputed) in checks {
                if !close(stored, recomputed) {
                    return Err(format!("{}: {name} {stored} != {recomputed}", r.model));
                }
            }
            let measured = [
                r.fp32_latency_us,
                r.fake_latency_us,
                r.int8_latency_us,
                r.fp32_mdsc,
                r.fake_mdsc,
                r.int8_mdsc,
            ];
            if measured.iter().any(|v| v.is_nan() || *v < 0.0) {
                return Err(format!("{}: negative or NaN measurement", r.model));
            }
        }
        Ok(())
    }

    /// Aligned text table in MB and ms.
    pub fn to_table(&self) -> String {
        let mb = |b: u64| b as f64 / 1e6;
        let ms = |us: f64| us / 1e3;
        let mut s = String::new();
        writeln!(
            s,
            "{:<20} {:>10} {:>10} {:>10} {:>6} | {:>10} {:>10} {:>10} {:>6} | {:>7} {:>7} {:>7}",
            "model",
            "FP32 MB",
            "fake MB",
            "INT8 MB",
            "ratio",
            "FP32 ms",
            "fake ms",
            "INT8 ms",
            "speed",
            "FP32",
            "fake",
            "INT8"
        )
        .unwrap();
        for r in &self.rows {
            writeln!(
                s,
                "{:<20} {:>10.3} {:>10.3} {:>10.3} {:>5.2}x | {:>10.3} {:>10.3} {:>10.3} {:>5.2}x | {:>7.4} {:>7.4} {:>7.4}",
                r.model,
                mb(r.fp32_bytes),
                mb(r.fake_bytes),
                mb(r.int8_bytes),
                r.size_ratio,
                ms(r.fp32_latency_us),
                ms(r.fake_latency_us),
                ms(r.int8_latency_us),
                r.latency_ratio,
                r.fp32_mdsc,
                r.fake_mdsc,
                r.int8_mdsc,
            )
            .unwrap();
        }
        s
    }

    /// JSON at `path` and the text table next to it with a `.txt` extension.
    pub fn write(&self, path: &Path) -> Result<(), BenchError> {
        io::write_json(path, self)?;
        io::write(&path.with_extension("txt"), self.to_table().as_bytes())
    }
}
