//! Range calibration and the affine quantization maps.

mod observer;
mod params;
mod table;

use thiserror::Error;

use crate::graph::GraphError;
use crate::kernels::ExecError;
use crate::qdq::QdqError;

pub use observer::{
    params_for_range, HistogramObserver, RangeObserver, DEGENERATE_SPAN, DEGENERATE_WIDEN, HISTOGRAM_BINS,
};
pub use params::{dequantize_scalar, quantize_scalar, QuantParams, MAX_BITS, MIN_BITS};
pub use table::{
    calibrate_graph, collect_histograms, collect_ranges, finalize_table, ActivationRanges, CalibMethod,
    CalibrationTable, HistogramStats, TableEntry,
};

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("invalid quantization parameters: {0}")]
    InvalidParams(String),
    #[error("quantized value {value} outside [0, {qmax}]")]
    QuantizedValueOutOfRange { value: i64, qmax: i32 },
    #[error("non-finite value in tensor `{tensor}`")]
    NonFiniteValue { tensor: String },
    #[error("observer has seen no values")]
    EmptyObserver,
    #[error("calibration dataset is empty")]
    EmptyDataset,
    #[error("calibration volume {index}: shape {actual:?} does not match input spec {expected:?}")]
    InputShapeMismatch {
        index: usize,
        expected: [usize; 5],
        actual: [usize; 5],
    },
    #[error("tensor `{0}` was selected but never produced")]
    MissingTensor(String),
    #[error("bad calibration table: {0}")]
    BadTable(String),
    #[error(transparent)]
    Policy(#[from] QdqError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}
