//! Post-training INT8 quantization for volumetric convolutional networks.
//!
//! The pipeline runs in three stages: [`calib`] gathers per-tensor ranges from
//! unlabeled volumes, [`qdq`] rewrites an FP32 [`graph::Graph`] into a
//! fake-quantized graph with Quantize/Dequantize pairs, and [`engine`] compiles
//! that graph into an integer plan with 8-bit weights. [`kernels`] holds the
//! executors: the FP32 reference, the INT8 engine, and the integer oracle that
//! defines bit-exact INT8 semantics.

pub mod calib;
pub mod engine;
pub mod graph;
pub mod kernels;
pub mod qdq;
