//! Experiment harness around `voxquant`: synthetic volumes, a small model zoo,
//! the calibrate → quantize → build pipeline, and size/latency/accuracy reports.

pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod latency;
pub mod pipeline;
pub mod report;
pub mod sweep;
pub mod zoo;

pub use error::{BenchError, Stage};
