//! INT8 engine executor: im2col over U8 codes, I16 zero-point-corrected
//! products accumulated in I32, and a float requantizing epilogue.

use super::conv::{conv3d_f32, dot_i16_i32, ConvGeometry, Parallelism};
use super::fp32::TensorData;
use super::{ops, ExecError, Volume};
use crate::engine::{EnginePlan, FallbackOp, PlanOp, TensorId};

/// `clamp(round_half_even(M * (acc + bias)) + z_y, clamp_lo, 255)`, evaluated in f64.
#[inline]
pub fn requantize_i32(acc: i32, bias: i32, m: f64, z_y: i32, clamp_lo: i32) -> u8 {
    let v = (m * (acc as i64 + bias as i64) as f64).round_ties_even();
    (v as i64 + z_y as i64).clamp(clamp_lo as i64, 255) as u8
}

/// Per-inference buffer budget and pool. One workspace serves one inference
/// at a time; concurrent inferences each need their own.
#[derive(Debug, Default)]
pub struct Workspace {
    capacity: usize,
    u8_pool: Vec<Vec<u8>>,
    f32_pool: Vec<Vec<f32>>,
}

impl Workspace {
    pub fn new(capacity_bytes: usize) -> Self {
        Self {
            capacity: capacity_bytes,
            ..Self::default()
        }
    }

    /// A workspace exactly as large as the plan's reported requirement.
    pub fn for_plan(plan: &EnginePlan) -> Self {
        Self::new(plan.workspace_bytes as usize)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn take_u8(&mut self, len: usize) -> Vec<u8> {
        let mut v = take_fit(&mut self.u8_pool, len);
        v.clear();
        v.resize(len, 0);
        v
    }

    fn take_f32(&mut self, len: usize) -> Vec<f32> {
        let mut v = take_fit(&mut self.f32_pool, len);
        v.clear();
        v.resize(len, 0.0);
        v
    }

    fn give(&mut self, t: TensorData) {
        match t {
            TensorData::U8(v) => self.u8_pool.push(v),
            TensorData::F32(v) => self.f32_pool.push(v),
        }
    }
}

fn take_fit<T>(pool: &mut Vec<Vec<T>>, len: usize) -> Vec<T> {
    match pool.iter().position(|v| v.capacity() >= len) {
        Some(i) => pool.swap_remove(i),
        None => Vec::with_capacity(len),
    }
}

#[derive(Debug)]
struct PreparedConv {
    /// `w_q - z_w` rows, one per output channel.
    weights: Vec<i16>,
    bias: Vec<i32>,
    zx: i32,
    zy: i32,
}

#[derive(Debug)]
struct PreparedFallbackConv {
    weights: Vec<f32>,
    bias: Option<Vec<f32>>,
}

#[derive(Debug)]
enum Prepared {
    None,
    Conv(PreparedConv),
    FallbackConv(PreparedFallbackConv),
    /// 256-entry code map for RequantizeTensor.
    Lut(Box<[u8; 256]>),
}

/// A validated plan prepared for repeated execution.
#[derive(Debug)]
pub struct Int8Executor {
    plan: EnginePlan,
    prepared: Vec<Prepared>,
    last_use: Vec<Option<usize>>,
    par: Parallelism,
}

fn f32_values(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

impl Int8Executor {
    pub fn new(plan: &EnginePlan) -> Result<Self, crate::engine::EngineError> {
        plan.validate()?;
        let prepared = plan
            .ops
            .iter()
            .map(|op| match op {
                PlanOp::FusedConvInt8(c) => {
                    let zw = plan.params[c.weight_params].zero_point;
                    let codes = &plan.weights[c.weights.offset..c.weights.end()];
                    Prepared::Conv(PreparedConv {
                        weights: codes.iter().map(|&q| (q as i32 - zw) as i16).collect(),
                        bias: plan.biases[c.bias_offset..c.bias_offset + c.geometry.out_channels].to_vec(),
                        zx: plan.tensor_params(c.input).zero_point,
                        zy: plan.tensor_params(c.output).zero_point,
                    })
                }
                PlanOp::Fp32Fallback {
                    op: FallbackOp::Conv3D { weight, bias, .. },
                    ..
                } => Prepared::FallbackConv(PreparedFallbackConv {
                    weights: f32_values(&plan.weights[weight.offset..weight.end()]),
                    bias: bias.map(|b| f32_values(&plan.weights[b.offset..b.end()])),
                }),
                PlanOp::RequantizeTensor { input, output } => {
                    let (from, to) = (plan.tensor_params(*input), plan.tensor_params(*output));
                    let mut lut = Box::new([0u8; 256]);
                    for (q, slot) in lut.iter_mut().enumerate() {
                        *slot = to.quantize_f32(from.dequantize_f32(q as u8));
                    }
                    Prepared::Lut(lut)
                }
                _ => Prepared::None,
            })
            .collect();
        Ok(Self {
            plan: plan.clone(),
            prepared,
            last_use: plan.last_uses(),
            par: Parallelism::sequential(),
        })
    }

    pub fn with_parallelism(mut self, par: Parallelism) -> Self {
        self.par = par;
        self
    }

    pub fn plan(&self) -> &EnginePlan {
        &self.plan
    }

    pub fn run(&self, inputs: &[&Volume], ws: &mut Workspace) -> Result<Vec<Volume>, ExecError> {
        self.run_with(inputs, ws, |_, _| Ok::<(), ExecError>(()))
    }

    /// Execute the plan, passing each tensor to `visit` (by plan tensor name)
    /// as soon as it is written.
    pub fn run_with<E: From<ExecError>>(
        &self,
        inputs: &[&Volume],
        ws: &mut Workspace,
        mut visit: impl FnMut(&str, &TensorData) -> Result<(), E>,
    ) -> Result<Vec<Volume>, E> {
        let plan = &self.plan;
        if ws.capacity < plan.workspace_bytes as usize {
            return Err(ExecError::WorkspaceTooSmall {
                required: plan.workspace_bytes as usize,
                available: ws.capacity,
            }
            .into());
        }
        let mut values: Vec<Option<TensorData>> = vec![None; plan.tensors.len()];
        bind_inputs(plan, inputs, &mut values)?;
        let mut live = 0usize;
        for (s, op) in plan.ops.iter().enumerate() {
            let out_id = op.output();
            let out_t = &plan.tensors[out_id];
            live += out_t.nbytes();
            if live > ws.capacity {
                return Err(ExecError::WorkspaceTooSmall {
                    required: live,
                    available: ws.capacity,
                }
                .into());
            }
            let result = self.step(s, op, &values, ws)?;
            visit(&out_t.name, &result)?;
            values[out_id] = Some(result);
            for t in op.inputs() {
                if self.last_use[t] == Some(s) && !plan.inputs.contains(&t) {
                    if let Some(v) = values[t].take() {
                        live -= plan.tensors[t].nbytes();
                        ws.give(v);
                    }
                }
            }
            if self.last_use[out_id].is_none() {
                if let Some(v) = values[out_id].take() {
                    live -= out_t.nbytes();
                    ws.give(v);
                }
            }
        }
        let mut outs = Vec::with_capacity(plan.outputs.len());
        for &o in &plan.outputs {
            let data = match values[o].take() {
                Some(TensorData::F32(v)) => v,
                _ => return Err(ExecError::ShapeMismatch(format!("output `{}` missing", plan.tensors[o].name)).into()),
            };
            outs.push(Volume::new(plan.tensors[o].shape, data)?);
        }
        Ok(outs)
    }

    fn step(
        &self,
        s: usize,
        op: &PlanOp,
        values: &[Option<TensorData>],
        ws: &mut Workspace,
    ) -> Result<TensorData, ExecError> {
        let plan = &self.plan;
        let get = |t: TensorId| values[t].as_ref().expect("validated plan order");
        let name = |t: TensorId| plan.tensors[t].name.as_str();
        let out_t = &plan.tensors[op.output()];
        Ok(match op {
            PlanOp::QuantizeInput { input, output } => {
                let p = plan.tensor_params(*output);
                let x = get(*input).as_f32(name(*input))?;
                let mut y = ws.take_u8(x.len());
                p.quantize_into(x, &mut y);
                TensorData::U8(y)
            }
            PlanOp::DequantizeOutput { input, .. } => {
                let p = plan.tensor_params(*input);
                let x = get(*input).as_u8(name(*input))?;
                let mut y = ws.take_f32(x.len());
                p.dequantize_into(x, &mut y);
                TensorData::F32(y)
            }
            PlanOp::RequantizeTensor { input, .. } => {
                let Prepared::Lut(lut) = &self.prepared[s] else {
                    unreachable!()
                };
                let x = get(*input).as_u8(name(*input))?;
                let mut y = ws.take_u8(x.len());
                for (d, &q) in y.iter_mut().zip(x) {
                    *d = lut[q as usize];
                }
                TensorData::U8(y)
            }
            PlanOp::FusedConvInt8(c) => {
                let Prepared::Conv(pc) = &self.prepared[s] else {
                    unreachable!()
                };
                let x = get(c.input).as_u8(name(c.input))?;
                let mut y = ws.take_u8(out_t.numel());
                conv3d_int8(
                    &c.geometry,
                    plan.batch,
                    x,
                    pc,
                    c.requant_multiplier,
                    c.clamp_lo,
                    &self.par,
                    &mut y,
                );
                TensorData::U8(y)
            }
            PlanOp::MaxPoolInt8 {
                input, kernel, stride, ..
            } => {
                let x = get(*input).as_u8(name(*input))?;
                TensorData::U8(ops::maxpool3d(x, plan.tensors[*input].shape, *kernel, *stride))
            }
            PlanOp::UpsampleInt8 { input, scale, .. } => {
                let x = get(*input).as_u8(name(*input))?;
                TensorData::U8(ops::upsample3d(x, plan.tensors[*input].shape, *scale))
            }
            PlanOp::ConcatInt8 { inputs, axis, .. } => {
                let mut parts = Vec::with_capacity(inputs.len());
                for &i in inputs {
                    parts.push((get(i).as_u8(name(i))?, plan.tensors[i].shape));
                }
                TensorData::U8(ops::concat(&parts, *axis))
            }
            PlanOp::Fp32Fallback { op, inputs, .. } => {
                let prepared = match &self.prepared[s] {
                    Prepared::FallbackConv(p) => Some(p),
                    _ => None,
                };
                let mut xs = Vec::with_capacity(inputs.len());
                for &i in inputs {
                    xs.push((get(i).as_f32(name(i))?, plan.tensors[i].shape));
                }
                TensorData::F32(run_fallback(
                    op,
                    &xs,
                    prepared.map(|p| (&p.weights[..], p.bias.as_deref())),
                    &self.par,
                ))
            }
        })
    }
}

pub(super) fn bind_inputs(
    plan: &EnginePlan,
    inputs: &[&Volume],
    values: &mut [Option<TensorData>],
) -> Result<(), ExecError> {
    if inputs.len() != plan.inputs.len() {
        return Err(ExecError::InputCount {
            expected: plan.inputs.len(),
            actual: inputs.len(),
        });
    }
    for (&id, v) in plan.inputs.iter().zip(inputs) {
        let t = &plan.tensors[id];
        if v.shape != t.shape {
            return Err(ExecError::ShapeMismatch(format!(
                "input `{}` has shape {:?}, expected {:?}",
                t.name, v.shape, t.shape
            )));
        }
        v.check_finite(&t.name)?;
        values[id] = Some(TensorData::F32(v.data.clone()));
    }
    Ok(())
}

/// FP32 fallback ops, shared by the engine executor and the oracle.
pub(super) fn run_fallback(
    op: &FallbackOp,
    xs: &[(&[f32], [usize; 5])],
    conv: Option<(&[f32], Option<&[f32]>)>,
    par: &Parallelism,
) -> Vec<f32> {
    let (x, shape) = xs[0];
    match op {
        FallbackOp::Conv3D { geometry, .. } => {
            let (w, b) = conv.expect("prepared fallback conv");
            conv3d_f32(geometry, shape[0], x, w, b, par)
        }
        FallbackOp::ReLU => ops::relu(x),
        FallbackOp::MaxPool3D { kernel, stride } => ops::maxpool3d(x, shape, *kernel, *stride),
        FallbackOp::Upsample3D { scale } => ops::upsample3d(x, shape, *scale),
        FallbackOp::Concat { axis } => ops::concat(xs, *axis),
        FallbackOp::Add => ops::add(x, xs[1].0),
        FallbackOp::Softmax { axis } => ops::softmax(x, shape, *axis),
        FallbackOp::ArgMax { axis } => ops::argmax(x, shape, *axis),
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3d_int8(
    geom: &ConvGeometry,
    batch: usize,
    x: &[u8],
    pc: &PreparedConv,
    m: f64,
    clamp_lo: i32,
    par: &Parallelism,
    out: &mut [u8],
) {
    let k = geom.fan_in();
    let cout = geom.out_channels;
    let positions = geom.out_positions();
    let tile = geom.tile_positions();
    let in_len = geom.in_channels * geom.in_positions();
    let zx = pc.zx;
    let mut pm = vec![0u8; positions * cout];
    for n in 0..batch {
        let xb = &x[n * in_len..(n + 1) * in_len];
        par.for_each_chunk(
            &mut pm,
            tile * cout,
            || vec![0i16; tile * k],
            |ti, chunk, patches| {
                let p0 = ti * tile;
                let count = chunk.len() / cout;
                for j in 0..count {
                    geom.gather(
                        xb,
                        p0 + j,
                        0i16,
                        |q| (q as i32 - zx) as i16,
                        &mut patches[j * k..(j + 1) * k],
                    );
                }
                for co in 0..cout {
                    let wrow = &pc.weights[co * k..(co + 1) * k];
                    let b = pc.bias[co];
                    for j in 0..count {
                        let acc = dot_i16_i32(wrow, &patches[j * k..(j + 1) * k]);
                        chunk[j * cout + co] = requantize_i32(acc, b, m, pc.zy, clamp_lo);
                    }
                }
            },
        );
        let ob = &mut out[n * cout * positions..(n + 1) * cout * positions];
        super::conv::transpose_into(&pm, positions, cout, ob);
    }
}

/// One-shot engine execution with a workspace sized from the plan.
pub fn execute_int8_engine(plan: &EnginePlan, input: &Volume) -> Result<Vec<Volume>, ExecError> {
    let ex = Int8Executor::new(plan).map_err(|e| ExecError::InvalidPlan(e.to_string()))?;
    ex.run(&[input], &mut Workspace::for_plan(plan))
}
