//! INT8 engine plans: compilation from fake-quantized graphs, validation,
//! liveness-based workspace sizing, and the binary engine file.

mod build;
mod format;
mod report;

use std::collections::HashMap;

use thiserror::Error;

use crate::calib::QuantParams;
use crate::graph::{DType, GraphError};
use crate::kernels::{ConvGeometry, MAX_INT8_FAN_IN};

pub use build::{build_engine, build_engine_with_batch};
pub use format::{deserialize_engine, serialize_engine, ENGINE_MAGIC, ENGINE_VERSION, FLAG_FP32_FALLBACK};
pub use report::{engine_size_report, graph_workspace_bytes, SectionSizes, SizeReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("node `{node}`: {bits}-bit quantization has no integer kernel (only 8-bit)")]
    UnsupportedBits { node: String, bits: u8 },
    #[error("node `{node}`: malformed quantize/dequantize pattern: {detail}")]
    MalformedQdqPattern { node: String, detail: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("node `{node}`: fan-in {fan_in} exceeds the 32-bit accumulator bound {max}")]
    AccumulatorOverflow { node: String, fan_in: usize, max: usize },
    #[error("node `{node}`: unsupported: {detail}")]
    Unsupported { node: String, detail: String },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("not an engine file (bad magic)")]
    BadMagic,
    #[error("unsupported engine version {0}")]
    UnsupportedVersion(u8),
    #[error("engine file is truncated")]
    TruncatedFile,
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed engine file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type TensorId = usize;
pub type ParamId = usize;

/// A plan tensor. U8 tensors carry the id of their quantization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: [usize; 5],
    pub params: Option<ParamId>,
}

impl PlanTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn nbytes(&self) -> usize {
        self.numel() * self.dtype.size_of()
    }
}

/// Byte range inside the plan's weight section.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ByteRange {
    pub offset: usize,
    pub len: usize,
}

impl ByteRange {
    pub fn end(&self) -> usize {
        self.offset.saturating_add(self.len)
    }
}

/// Conv3D (+ optional ReLU) on U8 codes with an I32 accumulator and a
/// requantizing epilogue:
/// `y = clamp(round_half_even(M * (acc + bias)) + z_y, clamp_lo, 255)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedConvInt8 {
    pub input: TensorId,
    pub output: TensorId,
    pub geometry: ConvGeometry,
    /// U8 weight codes, `(out, in, kd, kh, kw)`.
    pub weights: ByteRange,
    pub weight_params: ParamId,
    /// Start index of `out_channels` entries in the bias section.
    pub bias_offset: usize,
    pub requant_multiplier: f64,
    pub relu_fused: bool,
    pub clamp_lo: i32,
}

/// FP32 operations kept out of the integer domain.
#[derive(Debug, Clone, PartialEq)]
pub enum FallbackOp {
    /// Weights and optional bias are little-endian F32 in the weight section.
    Conv3D {
        geometry: ConvGeometry,
        weight: ByteRange,
        bias: Option<ByteRange>,
    },
    ReLU,
    MaxPool3D {
        kernel: [usize; 3],
        stride: [usize; 3],
    },
    Upsample3D {
        scale: [usize; 3],
    },
    Concat {
        axis: usize,
    },
    Add,
    Softmax {
        axis: usize,
    },
    ArgMax {
        axis: usize,
    },
}

impl FallbackOp {
    pub fn name(&self) -> &'static str {
        match self {
            FallbackOp::Conv3D { .. } => "Conv3D",
            FallbackOp::ReLU => "ReLU",
            FallbackOp::MaxPool3D { .. } => "MaxPool3D",
            FallbackOp::Upsample3D { .. } => "Upsample3D",
            FallbackOp::Concat { .. } => "Concat",
            FallbackOp::Add => "Add",
            FallbackOp::Softmax { .. } => "Softmax",
            FallbackOp::ArgMax { .. } => "ArgMax",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlanOp {
    /// F32 -> U8 with the output tensor's parameters.
    QuantizeInput {
        input: TensorId,
        output: TensorId,
    },
    FusedConvInt8(FusedConvInt8),
    MaxPoolInt8 {
        input: TensorId,
        output: TensorId,
        kernel: [usize; 3],
        stride: [usize; 3],
    },
    UpsampleInt8 {
        input: TensorId,
        output: TensorId,
        scale: [usize; 3],
    },
    /// All inputs and the output share one set of parameters.
    ConcatInt8 {
        inputs: Vec<TensorId>,
        output: TensorId,
        axis: usize,
    },
    /// U8 -> U8 between the input's and the output's parameters.
    RequantizeTensor {
        input: TensorId,
        output: TensorId,
    },
    /// U8 -> F32 with the input tensor's parameters.
    DequantizeOutput {
        input: TensorId,
        output: TensorId,
    },
    Fp32Fallback {
        op: FallbackOp,
        inputs: Vec<TensorId>,
        output: TensorId,
    },
}

impl PlanOp {
    pub fn kind_name(&self) -> &'static str {
        match self {
            PlanOp::QuantizeInput { .. } => "QuantizeInput",
            PlanOp::FusedConvInt8(_) => "FusedConvInt8",
            PlanOp::MaxPoolInt8 { .. } => "MaxPoolInt8",
            PlanOp::UpsampleInt8 { .. } => "UpsampleInt8",
            PlanOp::ConcatInt8 { .. } => "ConcatInt8",
            PlanOp::RequantizeTensor { .. } => "RequantizeTensor",
            PlanOp::DequantizeOutput { .. } => "DequantizeOutput",
            PlanOp::Fp32Fallback { .. } => "FP32Fallback",
        }
    }

    pub fn inputs(&self) -> Vec<TensorId> {
        match self {
            PlanOp::QuantizeInput { input, .. }
            | PlanOp::MaxPoolInt8 { input, .. }
            | PlanOp::UpsampleInt8 { input, .. }
            | PlanOp::RequantizeTensor { input, .. }
            | PlanOp::DequantizeOutput { input, .. } => vec![*input],
            PlanOp::FusedConvInt8(c) => vec![c.input],
            PlanOp::ConcatInt8 { inputs, .. } | PlanOp::Fp32Fallback { inputs, .. } => inputs.clone(),
        }
    }

    pub fn output(&self) -> TensorId {
        match self {
            PlanOp::QuantizeInput { output, .. }
            | PlanOp::MaxPoolInt8 { output, .. }
            | PlanOp::UpsampleInt8 { output, .. }
            | PlanOp::ConcatInt8 { output, .. }
            | PlanOp::RequantizeTensor { output, .. }
            | PlanOp::DequantizeOutput { output, .. }
            | PlanOp::Fp32Fallback { output, .. } => *output,
            PlanOp::FusedConvInt8(c) => c.output,
        }
    }
}

/// A compiled engine: ops in execution order over a registry of fixed-shape
/// tensors, plus the parameter, weight and bias sections they reference.
#[derive(Debug, Clone, PartialEq)]
pub struct EnginePlan {
    pub name: String,
    pub batch: usize,
    pub tensors: Vec<PlanTensor>,
    pub inputs: Vec<TensorId>,
    pub outputs: Vec<TensorId>,
    pub ops: Vec<PlanOp>,
    pub params: Vec<QuantParams>,
    pub weights: Vec<u8>,
    pub biases: Vec<i32>,
    /// Peak of live intermediate buffer bytes; see [`EnginePlan::compute_workspace_bytes`].
    pub workspace_bytes: u64,
}

impl EnginePlan {
    pub fn tensor_params(&self, t: TensorId) -> QuantParams {
        self.params[self.tensors[t].params.expect("U8 tensor has params")]
    }

    pub fn has_fallback(&self) -> bool {
        self.ops.iter().any(|op| matches!(op, PlanOp::Fp32Fallback { .. }))
    }

    pub fn count_ops(&self, kind: &str) -> usize {
        self.ops.iter().filter(|op| op.kind_name() == kind).count()
    }

    pub fn tensor_id(&self, name: &str) -> Option<TensorId> {
        self.tensors.iter().position(|t| t.name == name)
    }

    /// Step index of each tensor's last read; graph outputs live to the end.
    pub fn last_uses(&self) -> Vec<Option<usize>> {
        let mut last = vec![None; self.tensors.len()];
        for (s, op) in self.ops.iter().enumerate() {
            for t in op.inputs() {
                last[t] = Some(s);
            }
        }
        for &o in &self.outputs {
            last[o] = Some(self.ops.len());
        }
        last
    }

    /// Maximum over steps of the bytes held by live tensors. A tensor is live
    /// from the step that writes it through its last read (graph outputs until
    /// the end); graph inputs are caller-owned and excluded.
    pub fn compute_workspace_bytes(&self) -> u64 {
        let last = self.last_uses();
        let mut delta = vec![0i64; self.ops.len() + 2];
        for (s, op) in self.ops.iter().enumerate() {
            let t = op.output();
            let end = last[t].unwrap_or(s).max(s);
            let n = self.tensors[t].nbytes() as i64;
            delta[s] += n;
            delta[end + 1] -= n;
        }
        let mut live = 0i64;
        let mut peak = 0i64;
        for d in &delta[..self.ops.len()] {
            live += d;
            peak = peak.max(live);
        }
        peak as u64
    }

    /// Check every structural invariant the executors rely on.
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::InvalidPlan(m));
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        for (i, p) in self.params.iter().enumerate() {
            if p.validate().is_err() || p.bits != 8 {
                return bad(format!("quant params #{i} invalid for the integer engine: {p:?}"));
            }
        }
        let mut names = HashMap::new();
        for (i, t) in self.tensors.iter().enumerate() {
            if names.insert(t.name.as_str(), i).is_some() {
                return bad(format!("duplicate tensor name `{}`", t.name));
            }
            let bytes = t.shape.iter().try_fold(t.dtype.size_of(), |a, &d| a.checked_mul(d));
            if t.shape.contains(&0) || t.shape[0] != self.batch || !bytes.is_some_and(|b| b < 1 << 48) {
                return bad(format!("tensor `{}` has invalid shape {:?}", t.name, t.shape));
            }
            match (t.dtype, t.params) {
                (DType::U8, Some(p)) if p < self.params.len() => {}
                (DType::F32, None) => {}
                _ => {
                    return bad(format!(
                        "tensor `{}`: dtype {} with params {:?}",
                        t.name,
                        t.dtype.as_str(),
                        t.params
                    ))
                }
            }
        }
        let n = self.tensors.len();
        let mut written = vec![false; n];
        for &i in &self.inputs {
            if i >= n || self.tensors[i].dtype != DType::F32 || written[i] {
                return bad(format!("bad graph input id {i}"));
            }
            written[i] = true;
        }
        for (s, op) in self.ops.iter().enumerate() {
            let out = op.output();
            let ins = op.inputs();
            if out >= n || ins.iter().any(|&t| t >= n) {
                return bad(format!("op #{s}: tensor id out of range"));
            }
            for &t in &ins {
                if !written[t] {
                    return bad(format!("op #{s} reads `{}` before it is written", self.tensors[t].name));
                }
            }
            if written[out] {
                return bad(format!("tensor `{}` written twice", self.tensors[out].name));
            }
            written[out] = true;
            self.validate_op(s, op)?;
        }
        for &o in &self.outputs {
            if o >= n || !written[o] || self.tensors[o].dtype != DType::F32 {
                return bad(format!("bad graph output id {o}"));
            }
        }
        let ws = self.compute_workspace_bytes();
        if ws != self.workspace_bytes {
            return bad(format!(
                "recorded workspace {} differs from computed {ws}",
                self.workspace_bytes
            ));
        }
        Ok(())
    }

    fn validate_op(&self, s: usize, op: &PlanOp) -> Result<(), EngineError> {
        let fail = |m: String| EngineError::InvalidPlan(format!("op #{s} ({}): {m}", op.kind_name()));
        let t = |id: TensorId| &self.tensors[id];
        let expect = |id: TensorId, dtype: DType| -> Result<(), EngineError> {
            if t(id).dtype != dtype {
                return Err(fail(format!("`{}` should be {}", t(id).name, dtype.as_str())));
            }
            Ok(())
        };
        let same_shape = |a: TensorId, b: TensorId| -> Result<(), EngineError> {
            if t(a).shape != t(b).shape {
                return Err(fail(format!("shape {:?} vs {:?}", t(a).shape, t(b).shape)));
            }
            Ok(())
        };
        let same_params = |a: TensorId, b: TensorId| -> Result<(), EngineError> {
            if !self.tensor_params(a).same_as(&self.tensor_params(b)) {
                return Err(fail(format!(
                    "`{}` and `{}` have different params",
                    t(a).name,
                    t(b).name
                )));
            }
            Ok(())
        };
        match op {
            PlanOp::QuantizeInput { input, output } => {
                expect(*input, DType::F32)?;
                expect(*output, DType::U8)?;
                same_shape(*input, *output)?;
            }
            PlanOp::DequantizeOutput { input, output } => {
                expect(*input, DType::U8)?;
                expect(*output, DType::F32)?;
                same_shape(*input, *output)?;
            }
            PlanOp::RequantizeTensor { input, output } => {
                expect(*input, DType::U8)?;
                expect(*output, DType::U8)?;
                same_shape(*input, *output)?;
            }
            PlanOp::FusedConvInt8(c) => {
                expect(c.input, DType::U8)?;
                expect(c.output, DType::U8)?;
                let g = &c.geometry;
                if !g.is_consistent() {
                    return Err(fail("inconsistent geometry".into()));
                }
                check_conv_shapes(g, t(c.input).shape, t(c.output).shape).map_err(fail)?;
                if g.fan_in() > MAX_INT8_FAN_IN {
                    return Err(fail(format!("fan-in {} exceeds {MAX_INT8_FAN_IN}", g.fan_in())));
                }
                if c.weights.len != g.weight_len() || c.weights.end() > self.weights.len() {
                    return Err(fail("weight range out of bounds".into()));
                }
                if c.weight_params >= self.params.len() {
                    return Err(fail("weight params out of range".into()));
                }
                if c.bias_offset.saturating_add(g.out_channels) > self.biases.len() {
                    return Err(fail("bias range out of bounds".into()));
                }
                if !(c.requant_multiplier.is_finite() && c.requant_multiplier > 0.0) {
                    return Err(fail(format!("multiplier {} must be positive", c.requant_multiplier)));
                }
                let z_y = self.tensor_params(c.output).zero_point;
                let expected_lo = if c.relu_fused { z_y } else { 0 };
                if c.clamp_lo != expected_lo {
                    return Err(fail(format!("clamp_lo {} should be {expected_lo}", c.clamp_lo)));
                }
            }
            PlanOp::MaxPoolInt8 {
                input,
                output,
                kernel,
                stride,
            } => {
                expect(*input, DType::U8)?;
                expect(*output, DType::U8)?;
                same_params(*input, *output)?;
                check_pool_shapes(t(*input).shape, t(*output).shape, *kernel, *stride).map_err(fail)?;
            }
            PlanOp::UpsampleInt8 { input, output, scale } => {
                expect(*input, DType::U8)?;
                expect(*output, DType::U8)?;
                same_params(*input, *output)?;
                check_upsample_shapes(t(*input).shape, t(*output).shape, *scale).map_err(fail)?;
            }
            PlanOp::ConcatInt8 { inputs, output, axis } => {
                expect(*output, DType::U8)?;
                for &i in inputs {
                    expect(i, DType::U8)?;
                    same_params(i, *output)?;
                }
                let shapes: Vec<_> = inputs.iter().map(|&i| t(i).shape).collect();
                check_concat_shapes(&shapes, t(*output).shape, *axis).map_err(fail)?;
            }
            PlanOp::Fp32Fallback {
                op: fop,
                inputs,
                output,
            } => {
                expect(*output, DType::F32)?;
                for &i in inputs {
                    expect(i, DType::F32)?;
                }
                let arity = match fop {
                    FallbackOp::Concat { .. } => inputs.len().max(1),
                    FallbackOp::Add => 2,
                    _ => 1,
                };
                if inputs.is_empty() || inputs.len() != arity {
                    return Err(fail(format!("wrong input count {}", inputs.len())));
                }
                let x = t(inputs[0]).shape;
                let y = t(*output).shape;
                match fop {
                    FallbackOp::Conv3D { geometry, weight, bias } => {
                        if !geometry.is_consistent() {
                            return Err(fail("inconsistent geometry".into()));
                        }
                        check_conv_shapes(geometry, x, y).map_err(fail)?;
                        if weight.len != 4 * geometry.weight_len() || weight.end() > self.weights.len() {
                            return Err(fail("weight range out of bounds".into()));
                        }
                        if let Some(b) = bias {
                            if b.len != 4 * geometry.out_channels || b.end() > self.weights.len() {
                                return Err(fail("bias range out of bounds".into()));
                            }
                        }
                    }
                    FallbackOp::ReLU => same_shape(inputs[0], *output)?,
                    FallbackOp::Add => {
                        same_shape(inputs[0], *output)?;
                        same_shape(inputs[1], *output)?;
                    }
                    FallbackOp::MaxPool3D { kernel, stride } => {
                        check_pool_shapes(x, y, *kernel, *stride).map_err(fail)?
                    }
                    FallbackOp::Upsample3D { scale } => check_upsample_shapes(x, y, *scale).map_err(fail)?,
                    FallbackOp::Concat { axis } => {
                        let shapes: Vec<_> = inputs.iter().map(|&i| t(i).shape).collect();
                        check_concat_shapes(&shapes, y, *axis).map_err(fail)?;
                    }
                    FallbackOp::Softmax { axis } => {
                        if *axis >= 5 {
                            return Err(fail("axis out of range".into()));
                        }
                        same_shape(inputs[0], *output)?;
                    }
                    FallbackOp::ArgMax { axis } => {
                        if *axis >= 5 {
                            return Err(fail("axis out of range".into()));
                        }
                        let mut expected = x;
                        expected[*axis] = 1;
                        if y != expected {
                            return Err(fail(format!("output {y:?}, expected {expected:?}")));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_conv_shapes(g: &ConvGeometry, x: [usize; 5], y: [usize; 5]) -> Result<(), String> {
    let ex = [x[0], g.in_channels, g.input[0], g.input[1], g.input[2]];
    let ey = [x[0], g.out_channels, g.output[0], g.output[1], g.output[2]];
    if x != ex || y != ey {
        return Err(format!("conv shapes {x:?} -> {y:?} do not match geometry"));
    }
    Ok(())
}

fn check_pool_shapes(x: [usize; 5], y: [usize; 5], kernel: [usize; 3], stride: [usize; 3]) -> Result<(), String> {
    if kernel.contains(&0) || stride.contains(&0) || (0..3).any(|a| kernel[a] > x[a + 2]) {
        return Err("invalid pool window".into());
    }
    if y != crate::kernels::ops::pool_output(x, kernel, stride) {
        return Err(format!("pool shapes {x:?} -> {y:?}"));
    }
    Ok(())
}

fn check_upsample_shapes(x: [usize; 5], y: [usize; 5], scale: [usize; 3]) -> Result<(), String> {
    let bad = scale.contains(&0) || (0..3).any(|a| x[a + 2].checked_mul(scale[a]) != Some(y[a + 2]));
    if bad || y[..2] != x[..2] {
        return Err(format!("upsample shapes {x:?} -> {y:?}"));
    }
    Ok(())
}

fn check_concat_shapes(xs: &[[usize; 5]], y: [usize; 5], axis: usize) -> Result<(), String> {
    if axis >= 5 || xs.is_empty() {
        return Err("invalid concat".into());
    }
    let mut e = xs[0];
    e[axis] = 0;
    for x in xs {
        for a in 0..5 {
            if a != axis && x[a] != xs[0][a] {
                return Err(format!("concat inputs {:?} and {x:?} disagree", xs[0]));
            }
        }
        e[axis] = e[axis].checked_add(x[axis]).ok_or("concat extent overflows")?;
    }
    if y != e {
        return Err(format!("concat output {y:?}, expected {e:?}"));
    }
    Ok(())
}
