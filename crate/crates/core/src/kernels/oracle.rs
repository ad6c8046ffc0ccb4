//! Integer reference semantics for engine plans: direct nested loops with
//! 128-bit accumulators, written independently of the fast executor.

use super::fp32::TensorData;
use super::int8::{bind_inputs, run_fallback};
use super::{ExecError, Parallelism, Volume};
use crate::engine::{EnginePlan, FallbackOp, PlanOp};

/// Slow, obviously-correct evaluator of an [`EnginePlan`].
#[derive(Debug)]
pub struct IntegerOracle<'p> {
    plan: &'p EnginePlan,
}

fn le_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

impl<'p> IntegerOracle<'p> {
    pub fn new(plan: &'p EnginePlan) -> Result<Self, ExecError> {
        plan.validate().map_err(|e| ExecError::InvalidPlan(e.to_string()))?;
        Ok(Self { plan })
    }

    pub fn run(&self, inputs: &[&Volume]) -> Result<Vec<Volume>, ExecError> {
        self.run_with(inputs, |_, _| Ok::<(), ExecError>(()))
    }

    /// Evaluate every op, passing each written tensor to `visit`.
    pub fn run_with<E: From<ExecError>>(
        &self,
        inputs: &[&Volume],
        mut visit: impl FnMut(&str, &TensorData) -> Result<(), E>,
    ) -> Result<Vec<Volume>, E> {
        let plan = self.plan;
        let mut values: Vec<Option<TensorData>> = vec![None; plan.tensors.len()];
        bind_inputs(plan, inputs, &mut values)?;
        for op in &plan.ops {
            let out = self.step(op, &values)?;
            let id = op.output();
            visit(&plan.tensors[id].name, &out)?;
            values[id] = Some(out);
        }
        let mut outs = Vec::new();
        for &o in &plan.outputs {
            let data = values[o]
                .as_ref()
                .expect("written")
                .as_f32(&plan.tensors[o].name)?
                .to_vec();
            outs.push(Volume::new(plan.tensors[o].shape, data)?);
        }
        Ok(outs)
    }

    #[allow(clippy::needless_range_loop)]
    fn step(&self, op: &PlanOp, values: &[Option<TensorData>]) -> Result<TensorData, ExecError> {
        let plan = self.plan;
        let codes = |t: usize| values[t].as_ref().expect("written").as_u8(&plan.tensors[t].name);
        let floats = |t: usize| values[t].as_ref().expect("written").as_f32(&plan.tensors[t].name);
        Ok(match op {
            PlanOp::QuantizeInput { input, output } => {
                let p = plan.tensor_params(*output);
                let qmax = p.qmax() as f64;
                TensorData::U8(
                    floats(*input)?
                        .iter()
                        .map(|&x| {
                            let v = (x as f64 / p.scale).round_ties_even() + p.zero_point as f64;
                            v.clamp(0.0, qmax) as u8
                        })
                        .collect(),
                )
            }
            PlanOp::DequantizeOutput { input, .. } => {
                let p = plan.tensor_params(*input);
                TensorData::F32(
                    codes(*input)?
                        .iter()
                        .map(|&q| ((q as i64 - p.zero_point as i64) as f64 * p.scale) as f32)
                        .collect(),
                )
            }
            PlanOp::RequantizeTensor { input, output } => {
                let (from, to) = (plan.tensor_params(*input), plan.tensor_params(*output));
                TensorData::U8(
                    codes(*input)?
                        .iter()
                        .map(|&q| {
                            let real = ((q as i64 - from.zero_point as i64) as f64 * from.scale) as f32;
                            let v = (real as f64 / to.scale).round_ties_even() + to.zero_point as f64;
                            v.clamp(0.0, to.qmax() as f64) as u8
                        })
                        .collect(),
                )
            }
            PlanOp::FusedConvInt8(c) => {
                let g = &c.geometry;
                let x = codes(c.input)?;
                let zx = plan.tensor_params(c.input).zero_point as i128;
                let zw = plan.params[c.weight_params].zero_point as i128;
                let zy = plan.tensor_params(c.output).zero_point as i128;
                let w = &plan.weights[c.weights.offset..c.weights.end()];
                let bias = &plan.biases[c.bias_offset..];
                let [id_n, ih_n, iw_n] = g.input;
                let [od_n, oh_n, ow_n] = g.output;
                let [kd_n, kh_n, kw_n] = g.kernel;
                let mut y = Vec::with_capacity(plan.tensors[c.output].numel());
                for n in 0..plan.batch {
                    for co in 0..g.out_channels {
                        for od in 0..od_n {
                            for oh in 0..oh_n {
                                for ow in 0..ow_n {
                                    let mut acc: i128 = 0;
                                    for ci in 0..g.in_channels {
                                        for kd in 0..kd_n {
                                            for kh in 0..kh_n {
                                                for kw in 0..kw_n {
                                                    let d = (od * g.stride[0] + kd) as i64 - g.padding[0] as i64;
                                                    let h = (oh * g.stride[1] + kh) as i64 - g.padding[1] as i64;
                                                    let ww = (ow * g.stride[2] + kw) as i64 - g.padding[2] as i64;
                                                    let inside = d >= 0
                                                        && h >= 0
                                                        && ww >= 0
                                                        && (d as usize) < id_n
                                                        && (h as usize) < ih_n
                                                        && (ww as usize) < iw_n;
                                                    let xq = if inside {
                                                        let idx = (((n * g.in_channels + ci) * id_n + d as usize)
                                                            * ih_n
                                                            + h as usize)
                                                            * iw_n
                                                            + ww as usize;
                                                        x[idx] as i128
                                                    } else {
                                                        zx
                                                    };
                                                    let widx = (((co * g.in_channels + ci) * kd_n + kd) * kh_n + kh)
                                                        * kw_n
                                                        + kw;
                                                    acc += (xq - zx) * (w[widx] as i128 - zw);
                                                }
                                            }
                                        }
                                    }
                                    let total = acc + bias[co] as i128;
                                    let r = (c.requant_multiplier * total as f64).round_ties_even() as i128 + zy;
                                    y.push(r.clamp(c.clamp_lo as i128, 255) as u8);
                                }
                            }
                        }
                    }
                }
                TensorData::U8(y)
            }
            PlanOp::MaxPoolInt8 {
                input,
                output,
                kernel,
                stride,
            } => {
                let x = codes(*input)?;
                let [nb, ch, d_n, h_n, w_n] = plan.tensors[*input].shape;
                let [_, _, od_n, oh_n, ow_n] = plan.tensors[*output].shape;
                let mut y = Vec::new();
                for n in 0..nb {
                    for c in 0..ch {
                        for od in 0..od_n {
                            for oh in 0..oh_n {
                                for ow in 0..ow_n {
                                    let mut m = 0u8;
                                    for kd in 0..kernel[0] {
                                        for kh in 0..kernel[1] {
                                            for kw in 0..kernel[2] {
                                                let (d, h, w) =
                                                    (od * stride[0] + kd, oh * stride[1] + kh, ow * stride[2] + kw);
                                                m = m.max(x[(((n * ch + c) * d_n + d) * h_n + h) * w_n + w]);
                                            }
                                        }
                                    }
                                    y.push(m);
                                }
                            }
                        }
                    }
                }
                TensorData::U8(y)
            }
            PlanOp::UpsampleInt8 { input, output, scale } => {
                let x = codes(*input)?;
                let [_, _, d_n, h_n, w_n] = plan.tensors[*input].shape;
                let [nb, ch, od_n, oh_n, ow_n] = plan.tensors[*output].shape;
                let mut y = Vec::new();
                for n in 0..nb {
                    for c in 0..ch {
                        for od in 0..od_n {
                            for oh in 0..oh_n {
                                for ow in 0..ow_n {
                                    let (d, h, w) = (od / scale[0], oh / scale[1], ow / scale[2]);
                                    y.push(x[(((n * ch + c) * d_n + d) * h_n + h) * w_n + w]);
                                }
                            }
                        }
                    }
                }
                TensorData::U8(y)
            }
            PlanOp::ConcatInt8 { inputs, output, axis } => {
                let out_shape = plan.tensors[*output].shape;
                let total: usize = out_shape.iter().product();
                let mut y = vec![0u8; total];
                for (flat, slot) in y.iter_mut().enumerate() {
                    let mut idx = [0usize; 5];
                    let mut r = flat;
                    for a in (0..5).rev() {
                        idx[a] = r % out_shape[a];
                        r /= out_shape[a];
                    }
                    let mut along = idx[*axis];
                    for &i in inputs {
                        let s = plan.tensors[i].shape;
                        if along < s[*axis] {
                            let mut j = idx;
                            j[*axis] = along;
                            let k = (((j[0] * s[1] + j[1]) * s[2] + j[2]) * s[3] + j[3]) * s[4] + j[4];
                            *slot = codes(i)?[k];
                            break;
                        }
                        along -= s[*axis];
                    }
                }
                TensorData::U8(y)
            }
            PlanOp::Fp32Fallback { op, inputs, .. } => {
                let mut xs = Vec::with_capacity(inputs.len());
                for &i in inputs {
                    xs.push((floats(i)?, plan.tensors[i].shape));
                }
                let conv = match op {
                    FallbackOp::Conv3D { weight, bias, .. } => Some((
                        le_f32(&plan.weights[weight.offset..weight.end()]),
                        bias.map(|b| le_f32(&plan.weights[b.offset..b.end()])),
                    )),
                    _ => None,
                };
                let conv_ref = conv.as_ref().map(|(w, b)| (&w[..], b.as_deref()));
                TensorData::F32(run_fallback(op, &xs, conv_ref, &Parallelism::sequential()))
            }
        })
    }
}

/// One-shot oracle evaluation of a single-input plan.
pub fn execute_integer_oracle(plan: &EnginePlan, input: &Volume) -> Result<Vec<Volume>, ExecError> {
    IntegerOracle::new(plan)?.run(&[input])
}
