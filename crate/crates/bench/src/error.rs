use std::fmt;
use std::path::PathBuf;

use thiserror::Error;
use voxquant::calib::CalibError;
use voxquant::engine::EngineError;
use voxquant::graph::GraphError;
use voxquant::kernels::{DiceError, ExecError, VolumeError};
use voxquant::qdq::QdqError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Calibrate,
    Quantize,
    Build,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Calibrate => "calibrate",
            Stage::Quantize => "quantize",
            Stage::Build => "build",
        })
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Qdq(#[from] QdqError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Dice(#[from] DiceError),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<BenchError>,
    },
}

impl BenchError {
    pub fn in_stage(self, stage: Stage) -> Self {
        BenchError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Process exit code: 2 usage, 3 data, 4 build.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::InvalidConfig(_) => 2,
            BenchError::Engine(_) | BenchError::Qdq(_) => 4,
            BenchError::Calib(CalibError::Policy(_)) => 4,
            BenchError::Stage { source, .. } => source.exit_code(),
            _ => 3,
        }
    }

    /// The innermost error, looking through stage wrappers.
    pub fn root(&self) -> &BenchError {
        match self {
            BenchError::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}
