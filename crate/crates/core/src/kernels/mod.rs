//! Executors and kernels: the FP32 reference executor, the INT8 engine
//! executor, the integer oracle, and Dice evaluation.

pub mod conv;
mod dice;
mod fp32;
mod int8;
pub mod ops;
mod oracle;
mod volume;

use thiserror::Error;

use crate::graph::GraphError;

pub use conv::{ConvGeometry, Parallelism, MAX_INT8_FAN_IN};
pub use dice::{dice_per_class, DiceError, DiceScores};
pub use fp32::{execute_fp32, Fp32Executor, TensorData};
pub use int8::{execute_int8_engine, requantize_i32, Int8Executor, Workspace};
pub use oracle::{execute_integer_oracle, IntegerOracle};
pub use volume::{sidecar_path, LabelVolume, QuantizedTensor, Volume, VolumeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in `{0}`")]
    NonFiniteValue(String),
    #[error("workspace of {available} bytes is smaller than the {required} bytes the plan needs")]
    WorkspaceTooSmall { required: usize, available: usize },
    #[error("op `{op}`: fan-in {fan_in} can overflow the 32-bit accumulator")]
    AccumulatorOverflow { op: String, fan_in: usize },
    #[error("expected {expected} inputs, got {actual}")]
    InputCount { expected: usize, actual: usize },
    #[error("tensor `{tensor}` has dtype {actual}, expected {expected}")]
    DtypeMismatch {
        tensor: String,
        expected: &'static str,
        actual: &'static str,
    },
    #[error("invalid engine plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}
