//! Executors behind one interface, and Dice evaluation over a dataset.

use serde::{Deserialize, Serialize};
use voxquant::engine::EnginePlan;
use voxquant::graph::Graph;
use voxquant::kernels::{dice_per_class, Fp32Executor, Int8Executor, LabelVolume, Parallelism, Volume, Workspace};

use crate::data::Dataset;
use crate::BenchError;

/// Something that can be executed: an FP32 (or fake-quantized) graph, or an engine plan.
#[derive(Debug, Clone, Copy)]
pub enum Runnable<'a> {
    Graph(&'a Graph),
    Engine(&'a EnginePlan),
}

impl Runnable<'_> {
    /// Input shape at batch 1.
    pub fn input_shape(&self) -> Result<[usize; 5], BenchError> {
        match self {
            Runnable::Graph(g) => {
                let spec = g
                    .inputs
                    .first()
                    .ok_or_else(|| BenchError::InvalidConfig("model has no inputs".into()))?;
                Ok(spec.concrete_shape(1))
            }
            Runnable::Engine(p) => {
                let t = p
                    .inputs
                    .first()
                    .ok_or_else(|| BenchError::InvalidConfig("engine has no inputs".into()))?;
                Ok(p.tensors[*t].shape)
            }
        }
    }
}

pub enum Runner {
    Fp32(Box<Fp32Executor>),
    Int8(Box<Int8Executor>, Workspace),
}

impl Runner {
    pub fn new(r: Runnable<'_>, threads: usize) -> Result<Self, BenchError> {
        let par = Parallelism::with_threads(threads);
        Ok(match r {
            Runnable::Graph(g) => Runner::Fp32(Box::new(Fp32Executor::new(g, 1)?.with_parallelism(par))),
            Runnable::Engine(p) => Runner::Int8(
                Box::new(Int8Executor::new(p)?.with_parallelism(par)),
                Workspace::for_plan(p),
            ),
        })
    }

    pub fn run(&mut self, input: &Volume) -> Result<Vec<Volume>, BenchError> {
        Ok(match self {
            Runner::Fp32(e) => e.run(&[input])?,
            Runner::Int8(e, ws) => e.run(&[input], ws)?,
        })
    }

    /// Runs and converts the first (single-channel) output to labels.
    pub fn predict(&mut self, input: &Volume) -> Result<LabelVolume, BenchError> {
        let out = self.run(input)?;
        let first = out
            .into_iter()
            .next()
            .ok_or_else(|| BenchError::InvalidConfig("model has no outputs".into()))?;
        if first.shape[1] != 1 {
            return Err(BenchError::InvalidConfig(format!(
                "expected a single-channel label output, got shape {:?}",
                first.shape
            )));
        }
        Ok(first.to_labels())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceSummary {
    /// mDSC of each volume.
    pub per_volume: Vec<f64>,
    /// Average of the per-volume mDSC values.
    pub mean: f64,
}

/// Per-volume mDSC, averaged over the dataset.
pub fn evaluate_dice(r: Runnable<'_>, ds: &Dataset, threads: usize) -> Result<DiceSummary, BenchError> {
    if ds.is_empty() {
        return Err(BenchError::InvalidConfig("evaluation dataset is empty".into()));
    }
    let mut runner = Runner::new(r, threads)?;
    let per_volume = ds
        .volumes
        .iter()
        .zip(&ds.labels)
        .map(|(v, gt)| Ok(dice_per_class(&runner.predict(v)?, gt, ds.config.classes)?.mean))
        .collect::<Result<Vec<_>, BenchError>>()?;
    let mean = per_volume.iter().sum::<f64>() / per_volume.len() as f64;
    Ok(DiceSummary { per_volume, mean })
}
