//! Compilation of fake-quantized graphs into integer plans.
//!
//! The builder walks the graph in topological order, tracking for every
//! tensor whether it is a plain F32 activation, a U8 code tensor, a lazy
//! dequantized view of codes, or a (possibly quantized) weight. Quantized
//! views flow through integer ops untouched and are only materialized as F32
//! when an FP32 fallback or a graph output needs them.

use std::collections::{HashMap, HashSet};

use super::{ByteRange, EngineError, EnginePlan, FallbackOp, FusedConvInt8, ParamId, PlanOp, PlanTensor, TensorId};
use crate::calib::QuantParams;
use crate::graph::{validate_and_infer_shapes, DType, Graph, Node, Op, TypedGraph};
use crate::kernels::{ConvGeometry, MAX_INT8_FAN_IN};

#[derive(Debug, Clone)]
enum Val {
    Float(TensorId),
    Quant(TensorId),
    /// F32 view `name` of a code tensor, materialized on demand.
    Deq {
        codes: TensorId,
        name: String,
    },
    Weight(String),
    WeightCodes {
        name: String,
        params: QuantParams,
    },
    WeightDeq {
        name: String,
        params: QuantParams,
    },
}

/// Compile for batch size 1.
pub fn build_engine(g: &Graph) -> Result<EnginePlan, EngineError> {
    build_engine_with_batch(g, 1)
}

pub fn build_engine_with_batch(g: &Graph, batch: usize) -> Result<EnginePlan, EngineError> {
    let typed = validate_and_infer_shapes(g, batch)?;
    let mut b = Builder {
        typed: &typed,
        consumers: typed.graph.consumers(),
        plan: EnginePlan {
            name: g.name.clone(),
            batch,
            tensors: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            ops: Vec::new(),
            params: Vec::new(),
            weights: Vec::new(),
            biases: Vec::new(),
            workspace_bytes: 0,
        },
        names: HashMap::new(),
        state: HashMap::new(),
        materialized: HashMap::new(),
        requantized: HashMap::new(),
        absorbed: HashSet::new(),
    };
    b.run()?;
    let mut plan = b.plan;
    plan.workspace_bytes = plan.compute_workspace_bytes();
    plan.validate()?;
    Ok(plan)
}

struct Builder<'a> {
    typed: &'a TypedGraph,
    consumers: std::collections::HashMap<&'a str, Vec<usize>>,
    plan: EnginePlan,
    names: HashMap<String, TensorId>,
    state: HashMap<String, Val>,
    materialized: HashMap<TensorId, TensorId>,
    requantized: HashMap<(TensorId, ParamId), TensorId>,
    absorbed: HashSet<usize>,
}

fn malformed(node: &Node, detail: impl Into<String>) -> EngineError {
    EngineError::MalformedQdqPattern {
        node: node.id.clone(),
        detail: detail.into(),
    }
}

fn unsupported(node: &Node, detail: impl Into<String>) -> EngineError {
    EngineError::Unsupported {
        node: node.id.clone(),
        detail: detail.into(),
    }
}

fn check_bits(node: &Node, p: &QuantParams) -> Result<(), EngineError> {
    if p.bits != 8 {
        return Err(EngineError::UnsupportedBits {
            node: node.id.clone(),
            bits: p.bits,
        });
    }
    Ok(())
}

impl<'a> Builder<'a> {
    fn graph(&self) -> &'a Graph {
        &self.typed.graph
    }

    fn shape(&self, name: &str) -> Result<[usize; 5], EngineError> {
        let info = &self.typed.tensors[name];
        info.shape
            .as_slice()
            .try_into()
            .map_err(|_| EngineError::ShapeMismatch(format!("`{name}` is not a rank-5 activation")))
    }

    fn param_id(&mut self, p: QuantParams) -> ParamId {
        if let Some(i) = self.plan.params.iter().position(|q| q.same_as(&p)) {
            return i;
        }
        self.plan.params.push(p);
        self.plan.params.len() - 1
    }

    fn add_tensor(
        &mut self,
        name: &str,
        dtype: DType,
        shape: [usize; 5],
        params: Option<ParamId>,
    ) -> Result<TensorId, EngineError> {
        if self.names.contains_key(name) {
            return Err(EngineError::InvalidPlan(format!("tensor name `{name}` produced twice")));
        }
        let id = self.plan.tensors.len();
        self.plan.tensors.push(PlanTensor {
            name: name.to_string(),
            dtype,
            shape,
            params,
        });
        self.names.insert(name.to_string(), id);
        Ok(id)
    }

    fn params_of(&self, t: TensorId) -> QuantParams {
        self.plan.tensor_params(t)
    }

    fn val(&self, node: &Node, i: usize) -> Result<Val, EngineError> {
        self.state
            .get(&node.inputs[i])
            .cloned()
            .ok_or_else(|| malformed(node, format!("input `{}` has no value", node.inputs[i])))
    }

    /// F32 tensor for `v`, materializing dequantized views.
    fn float(&mut self, node: &Node, v: &Val) -> Result<TensorId, EngineError> {
        match v {
            Val::Float(id) => Ok(*id),
            Val::Deq { codes, name } => self.materialize(*codes, name),
            Val::Quant(_) => Err(malformed(node, "U8 codes consumed without a Dequantize")),
            _ => Err(unsupported(node, "weights used as activations")),
        }
    }

    fn materialize(&mut self, codes: TensorId, name: &str) -> Result<TensorId, EngineError> {
        if let Some(&id) = self.materialized.get(&codes) {
            return Ok(id);
        }
        let shape = self.plan.tensors[codes].shape;
        let id = self.add_tensor(name, DType::F32, shape, None)?;
        self.plan.ops.push(PlanOp::DequantizeOutput {
            input: codes,
            output: id,
        });
        self.materialized.insert(codes, id);
        Ok(id)
    }

    fn requantize(&mut self, codes: TensorId, target: ParamId) -> Result<TensorId, EngineError> {
        if let Some(&id) = self.requantized.get(&(codes, target)) {
            return Ok(id);
        }
        let name = format!("{}#rq{target}", self.plan.tensors[codes].name);
        let shape = self.plan.tensors[codes].shape;
        let id = self.add_tensor(&name, DType::U8, shape, Some(target))?;
        self.plan.ops.push(PlanOp::RequantizeTensor {
            input: codes,
            output: id,
        });
        self.requantized.insert((codes, target), id);
        Ok(id)
    }

    /// F32 values of a weight as the fake graph sees them.
    fn weight_values(&self, node: &Node, v: &Val) -> Result<Vec<f32>, EngineError> {
        match v {
            Val::Weight(name) => Ok(self.graph().weight_f32(name)?),
            Val::WeightDeq { name, params } => Ok(self
                .graph()
                .weight_f32(name)?
                .into_iter()
                .map(|w| params.dequantize_f32(params.quantize_f32(w)))
                .collect()),
            _ => Err(unsupported(node, "convolution weights must be stored tensors")),
        }
    }

    fn push_f32(&mut self, values: &[f32]) -> ByteRange {
        let offset = self.plan.weights.len();
        for v in values {
            self.plan.weights.extend_from_slice(&v.to_le_bytes());
        }
        ByteRange {
            offset,
            len: values.len() * 4,
        }
    }

    fn run(&mut self) -> Result<(), EngineError> {
        let g = self.graph();
        for spec in &g.inputs {
            let id = self.add_tensor(&spec.name, DType::F32, spec.concrete_shape(self.typed.batch), None)?;
            self.plan.inputs.push(id);
            self.state.insert(spec.name.clone(), Val::Float(id));
        }
        for w in &g.weights {
            self.state.insert(w.name.clone(), Val::Weight(w.name.clone()));
        }
        for &i in &self.typed.order {
            if !self.absorbed.contains(&i) {
                self.node(i)?;
            }
        }
        for spec in &g.outputs {
            let v = self.state[&spec.name].clone();
            let id = match v {
                Val::Float(id) => id,
                Val::Deq { codes, name } => self.materialize(codes, &name)?,
                _ => {
                    return Err(EngineError::Unsupported {
                        node: spec.name.clone(),
                        detail: "graph outputs must be F32 activations".into(),
                    })
                }
            };
            self.plan.outputs.push(id);
        }
        Ok(())
    }

    fn node(&mut self, i: usize) -> Result<(), EngineError> {
        let g = self.graph();
        let node = &g.nodes[i];
        let out = node.outputs[0].as_str();
        let new = match &node.op {
            Op::Quantize(p) => {
                check_bits(node, p)?;
                match self.val(node, 0)? {
                    Val::Float(x) => {
                        let pid = self.param_id(*p);
                        let t = self.add_tensor(out, DType::U8, self.shape(out)?, Some(pid))?;
                        self.plan.ops.push(PlanOp::QuantizeInput { input: x, output: t });
                        Val::Quant(t)
                    }
                    Val::Deq { codes, .. } if self.params_of(codes).same_as(p) => Val::Quant(codes),
                    Val::Deq { codes, .. } => {
                        let pid = self.param_id(*p);
                        let t = self.add_tensor(out, DType::U8, self.shape(out)?, Some(pid))?;
                        self.plan.ops.push(PlanOp::RequantizeTensor {
                            input: codes,
                            output: t,
                        });
                        Val::Quant(t)
                    }
                    Val::Weight(name) => Val::WeightCodes { name, params: *p },
                    _ => return Err(malformed(node, "Quantize applied to already-quantized values")),
                }
            }
            Op::Dequantize(p) => {
                check_bits(node, p)?;
                match self.val(node, 0)? {
                    Val::Quant(t) if self.params_of(t).same_as(p) => Val::Deq {
                        codes: t,
                        name: out.to_string(),
                    },
                    Val::WeightCodes { name, params } if params.same_as(p) => Val::WeightDeq { name, params },
                    Val::Quant(_) | Val::WeightCodes { .. } => {
                        return Err(malformed(
                            node,
                            "Dequantize parameters differ from the matching Quantize",
                        ))
                    }
                    _ => return Err(malformed(node, "Dequantize input is not produced by a Quantize")),
                }
            }
            Op::Conv3D(attrs) => {
                let x = self.val(node, 0)?;
                let w = self.val(node, 1)?;
                let bias = if node.inputs.len() > 2 {
                    Some(self.val(node, 2)?)
                } else {
                    None
                };
                let xs = self.shape(&node.inputs[0])?;
                let geometry = ConvGeometry::new(attrs, [xs[2], xs[3], xs[4]]);
                if let (Val::Deq { codes, .. }, Val::WeightDeq { name, params }) = (&x, &w) {
                    if let Some((qi, relu)) = self.fusion_target(i) {
                        return self.fuse(i, qi, relu, geometry, *codes, name, *params, bias.as_ref());
                    }
                }
                let xf = self.float(node, &x)?;
                let wv = self.weight_values(node, &w)?;
                let weight = self.push_f32(&wv);
                let bias = match &bias {
                    Some(b) => {
                        let bv = self.weight_values(node, b)?;
                        Some(self.push_f32(&bv))
                    }
                    None => None,
                };
                self.fallback(out, FallbackOp::Conv3D { geometry, weight, bias }, vec![xf])?
            }
            Op::ReLU => {
                let x = self.val(node, 0)?;
                let xf = self.float(node, &x)?;
                self.fallback(out, FallbackOp::ReLU, vec![xf])?
            }
            Op::MaxPool3D { kernel, stride } => match self.val(node, 0)? {
                Val::Deq { codes, .. } => {
                    let t = self.int_output(out, codes)?;
                    self.plan.ops.push(PlanOp::MaxPoolInt8 {
                        input: codes,
                        output: t,
                        kernel: *kernel,
                        stride: *stride,
                    });
                    Val::Deq {
                        codes: t,
                        name: out.to_string(),
                    }
                }
                x => {
                    let xf = self.float(node, &x)?;
                    self.fallback(
                        out,
                        FallbackOp::MaxPool3D {
                            kernel: *kernel,
                            stride: *stride,
                        },
                        vec![xf],
                    )?
                }
            },
            Op::Upsample3D { scale } => match self.val(node, 0)? {
                Val::Deq { codes, .. } => {
                    let t = self.int_output(out, codes)?;
                    self.plan.ops.push(PlanOp::UpsampleInt8 {
                        input: codes,
                        output: t,
                        scale: *scale,
                    });
                    Val::Deq {
                        codes: t,
                        name: out.to_string(),
                    }
                }
                x => {
                    let xf = self.float(node, &x)?;
                    self.fallback(out, FallbackOp::Upsample3D { scale: *scale }, vec![xf])?
                }
            },
            Op::Concat { axis } => {
                let vals: Vec<Val> = (0..node.inputs.len())
                    .map(|k| self.val(node, k))
                    .collect::<Result<_, _>>()?;
                let codes: Option<Vec<TensorId>> = vals
                    .iter()
                    .map(|v| match v {
                        Val::Deq { codes, .. } => Some(*codes),
                        _ => None,
                    })
                    .collect();
                let int = match codes {
                    Some(codes) => self.concat_int8(node, &codes, *axis)?,
                    None => None,
                };
                match int {
                    Some(v) => v,
                    None => {
                        let mut xs = Vec::with_capacity(vals.len());
                        for v in &vals {
                            xs.push(self.float(node, v)?);
                        }
                        self.fallback(out, FallbackOp::Concat { axis: *axis }, xs)?
                    }
                }
            }
            Op::Add => {
                let a = self.val(node, 0)?;
                let b = self.val(node, 1)?;
                let xs = vec![self.float(node, &a)?, self.float(node, &b)?];
                self.fallback(out, FallbackOp::Add, xs)?
            }
            Op::Softmax { axis } => {
                let x = self.val(node, 0)?;
                let xf = self.float(node, &x)?;
                self.fallback(out, FallbackOp::Softmax { axis: *axis }, vec![xf])?
            }
            Op::ArgMax { axis } => {
                let x = self.val(node, 0)?;
                let xf = self.float(node, &x)?;
                self.fallback(out, FallbackOp::ArgMax { axis: *axis }, vec![xf])?
            }
        };
        self.state.insert(out.to_string(), new);
        Ok(())
    }

    fn fallback(&mut self, out: &str, op: FallbackOp, inputs: Vec<TensorId>) -> Result<Val, EngineError> {
        let t = self.add_tensor(out, DType::F32, self.shape(out)?, None)?;
        self.plan.ops.push(PlanOp::Fp32Fallback { op, inputs, output: t });
        Ok(Val::Float(t))
    }

    /// Code tensor for an integer op that keeps its input's parameters.
    fn int_output(&mut self, out: &str, input: TensorId) -> Result<TensorId, EngineError> {
        let pid = self.plan.tensors[input].params;
        self.add_tensor(&format!("{out}#q"), DType::U8, self.shape(out)?, pid)
    }

    /// The Quantize (and optional ReLU between) that a conv output feeds
    /// exclusively, if any.
    fn fusion_target(&self, conv: usize) -> Option<(usize, Option<usize>)> {
        let g = self.graph();
        let sole_consumer = |t: &str| -> Option<usize> {
            if g.is_graph_output(t) {
                return None;
            }
            match self.consumers.get(t).map(Vec::as_slice) {
                Some([c]) => Some(*c),
                _ => None,
            }
        };
        let c = sole_consumer(&g.nodes[conv].outputs[0])?;
        match g.nodes[c].op {
            Op::Quantize(_) => Some((c, None)),
            Op::ReLU => {
                let q = sole_consumer(&g.nodes[c].outputs[0])?;
                matches!(g.nodes[q].op, Op::Quantize(_)).then_some((q, Some(c)))
            }
            _ => None,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn fuse(
        &mut self,
        conv: usize,
        qi: usize,
        relu: Option<usize>,
        geometry: ConvGeometry,
        input: TensorId,
        weight: &str,
        wp: QuantParams,
        bias: Option<&Val>,
    ) -> Result<(), EngineError> {
        let g = self.graph();
        let node = &g.nodes[conv];
        let qnode = &g.nodes[qi];
        let Op::Quantize(py) = qnode.op else { unreachable!() };
        check_bits(qnode, &py)?;
        if geometry.fan_in() > MAX_INT8_FAN_IN {
            return Err(EngineError::AccumulatorOverflow {
                node: node.id.clone(),
                fan_in: geometry.fan_in(),
                max: MAX_INT8_FAN_IN,
            });
        }
        let px = self.params_of(input);
        let codes: Vec<u8> = g.weight_f32(weight)?.into_iter().map(|w| wp.quantize_f32(w)).collect();
        let bias_f32 = match bias {
            Some(b) => self.weight_values(node, b)?,
            None => vec![0.0; geometry.out_channels],
        };
        let sxsw = px.scale * wp.scale;
        let mut bias_i32 = Vec::with_capacity(bias_f32.len());
        for b in bias_f32 {
            let r = (b as f64 / sxsw).round_ties_even();
            if !(i32::MIN as f64..=i32::MAX as f64).contains(&r) {
                return Err(unsupported(
                    node,
                    format!("bias {b} does not fit an I32 at scale {sxsw}"),
                ));
            }
            bias_i32.push(r as i32);
        }

        let q_out = &qnode.outputs[0];
        let pid = self.param_id(py);
        let wpid = self.param_id(wp);
        let output = self.add_tensor(q_out, DType::U8, self.shape(q_out)?, Some(pid))?;
        let weights = ByteRange {
            offset: self.plan.weights.len(),
            len: codes.len(),
        };
        self.plan.weights.extend_from_slice(&codes);
        let bias_offset = self.plan.biases.len();
        self.plan.biases.extend_from_slice(&bias_i32);
        self.plan.ops.push(PlanOp::FusedConvInt8(FusedConvInt8 {
            input,
            output,
            geometry,
            weights,
            weight_params: wpid,
            bias_offset,
            requant_multiplier: sxsw / py.scale,
            relu_fused: relu.is_some(),
            clamp_lo: if relu.is_some() { py.zero_point } else { 0 },
        }));
        self.absorbed.insert(qi);
        if let Some(r) = relu {
            self.absorbed.insert(r);
        }
        self.state.insert(q_out.clone(), Val::Quant(output));
        Ok(())
    }

    /// Integer concat. All branches are brought to one parameter set: the
    /// downstream Quantize's when the output feeds exactly one Quantize (so
    /// that Quantize cancels), otherwise that of the widest input whose range
    /// covers every other input, ties going to the first. `None` when no input
    /// covers the rest.
    fn concat_int8(&mut self, node: &Node, codes: &[TensorId], axis: usize) -> Result<Option<Val>, EngineError> {
        let g = self.graph();
        let out = node.outputs[0].as_str();
        let downstream = match self.consumers.get(out).map(Vec::as_slice) {
            Some([c]) if !g.is_graph_output(out) => match g.nodes[*c].op {
                Op::Quantize(p) if p.bits == 8 => Some(p),
                _ => None,
            },
            _ => None,
        };
        let target = match downstream {
            Some(p) => self.param_id(p),
            None => {
                let range = |t| self.params_of(t).representable_range();
                let covers = |a: TensorId| {
                    let (lo, hi) = range(a);
                    codes.iter().all(|&b| {
                        let (blo, bhi) = range(b);
                        lo <= blo && bhi <= hi
                    })
                };
                let mut best: Option<TensorId> = None;
                for &c in codes {
                    let span = |t| {
                        let (lo, hi) = range(t);
                        hi - lo
                    };
                    if covers(c) && best.is_none_or(|b| span(c) > span(b)) {
                        best = Some(c);
                    }
                }
                match best {
                    Some(b) => self.plan.tensors[b].params.expect("code tensor"),
                    // No branch can hold the others without clipping.
                    None => return Ok(None),
                }
            }
        };
        let mut inputs = Vec::with_capacity(codes.len());
        for &c in codes {
            if self.plan.tensors[c].params == Some(target) {
                inputs.push(c);
            } else {
                inputs.push(self.requantize(c, target)?);
            }
        }
        let t = self.add_tensor(&format!("{out}#q"), DType::U8, self.shape(out)?, Some(target))?;
        self.plan.ops.push(PlanOp::ConcatInt8 {
            inputs,
            output: t,
            axis,
        });
        Ok(Some(Val::Deq {
            codes: t,
            name: out.to_string(),
        }))
    }
}
