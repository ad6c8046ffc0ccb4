//! Latency measurement: untimed warmups, then timed runs on a fixed seeded input.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use voxquant::kernels::Volume;

use crate::eval::{Runnable, Runner};
use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    #[default]
    Median,
    Mean,
    P95,
}

impl FromStr for Statistic {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "median" => Ok(Self::Median),
            "mean" => Ok(Self::Mean),
            "p95" => Ok(Self::P95),
            _ => Err(format!("unknown statistic `{s}` (expected median, mean or p95)")),
        }
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Median => "median",
            Self::Mean => "mean",
            Self::P95 => "p95",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub warmup_runs: usize,
    pub timed_runs: usize,
    pub statistic: Statistic,
    /// Defaults to the model's input shape at batch 1.
    pub input_shape: Option<[usize; 5]>,
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup_runs: 5,
            timed_runs: 30,
            statistic: Statistic::Median,
            input_shape: None,
            threads: 1,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.timed_runs < 3 {
            return Err(BenchError::InvalidConfig(format!(
                "timed_runs must be at least 3, got {}",
                self.timed_runs
            )));
        }
        if self.threads == 0 {
            return Err(BenchError::InvalidConfig("threads must be at least 1".into()));
        }
        Ok(())
    }
}

/// Timings in microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub statistic: Statistic,
    /// The configured statistic.
    pub value_us: f64,
    pub median_us: f64,
    pub mean_us: f64,
    pub p95_us: f64,
    pub min_us: f64,
    pub max_us: f64,
    pub warmup_runs: usize,
    pub threads: usize,
    pub samples_us: Vec<f64>,
}

impl LatencyStats {
    pub fn from_samples(samples_us: Vec<f64>, cfg: &BenchConfig) -> Self {
        let mut sorted = samples_us.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median_us = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        let mean_us = sorted.iter().sum::<f64>() / n as f64;
        // Nearest rank.
        let p95_us = sorted[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        let value_us = match cfg.statistic {
            Statistic::Median => median_us,
            Statistic::Mean => mean_us,
            Statistic::P95 => p95_us,
        };
        Self {
            statistic: cfg.statistic,
            value_us,
            median_us,
            mean_us,
            p95_us,
            min_us: sorted[0],
            max_us: sorted[n - 1],
            warmup_runs: cfg.warmup_runs,
            threads: cfg.threads,
            samples_us,
        }
    }
}

pub fn seeded_input(shape: [usize; 5], seed: u64) -> Volume {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.iter().product::<usize>())
        .map(|_| r.random_range(0.0f32..1.0))
        .collect();
    Volume::new(shape, data).expect("shape matches")
}

/// Only the execute call is timed; executor setup and input generation are not.
pub fn bench_latency(r: Runnable<'_>, cfg: &BenchConfig) -> Result<LatencyStats, BenchError> {
    cfg.validate()?;
    let shape = match cfg.input_shape {
        Some(s) => s,
        None => r.input_shape()?,
    };
    let input = seeded_input(shape, cfg.seed);
    let mut runner = Runner::new(r, cfg.threads)?;
    for _ in 0..cfg.warmup_runs {
        runner.run(&input)?;
    }
    let mut samples = Vec::with_capacity(cfg.timed_runs);
    for _ in 0..cfg.timed_runs {
        let t = Instant::now();
        let out = runner.run(&input)?;
        samples.push(t.elapsed().as_secs_f64() * 1e6);
        drop(out);
    }
    Ok(LatencyStats::from_samples(samples, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statistics() {
        let cfg = BenchConfig::default();
        let s = LatencyStats::from_samples((1..=20).map(f64::from).collect(), &cfg);
        assert_eq!(s.median_us, 10.5);
        assert_eq!(s.mean_us, 10.5);
        assert_eq!(s.p95_us, 19.0);
        assert_eq!((s.min_us, s.max_us), (1.0, 20.0));
        assert_eq!(s.value_us, s.median_us);
    }

    #[test]
    fn config_bounds() {
        assert!(BenchConfig {
            timed_runs: 2,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(BenchConfig {
            threads: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(BenchConfig {
            warmup_runs: 0,
            timed_runs: 3,
            ..Default::default()
        }
        .validate()
        .is_ok());
    }
}
