//! FP32 reference executor. Quantize/Dequantize nodes are honored with the
//! fake-quantization semantics, so the same executor runs FP32 and
//! fake-quantized graphs.

use std::collections::HashMap;

use super::conv::{conv3d_f32, ConvGeometry, Parallelism};
use super::ops;
use super::{ExecError, Volume};
use crate::graph::{validate_and_infer_shapes, DType, Graph, Node, Op, TypedGraph};

/// A materialized tensor value.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype_str(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "F32",
            TensorData::U8(_) => "U8",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_f32(&self, name: &str) -> Result<&[f32], ExecError> {
        match self {
            TensorData::F32(v) => Ok(v),
            other => Err(dtype_err(name, "F32", other)),
        }
    }

    pub fn as_u8(&self, name: &str) -> Result<&[u8], ExecError> {
        match self {
            TensorData::U8(v) => Ok(v),
            other => Err(dtype_err(name, "U8", other)),
        }
    }
}

fn dtype_err(name: &str, expected: &'static str, actual: &TensorData) -> ExecError {
    ExecError::DtypeMismatch {
        tensor: name.to_string(),
        expected,
        actual: actual.dtype_str(),
    }
}

/// A graph prepared for repeated FP32 execution at a fixed batch size.
///
/// Weights are decoded once and every node whose inputs are all constant
/// (e.g. weight Quantize/Dequantize pairs) is folded ahead of time.
#[derive(Debug)]
pub struct Fp32Executor {
    typed: TypedGraph,
    constants: HashMap<String, TensorData>,
    steps: Vec<usize>,
    /// Tensors whose last reader is `steps[i]`.
    frees: Vec<Vec<String>>,
    par: Parallelism,
}

impl Fp32Executor {
    pub fn new(g: &Graph, batch: usize) -> Result<Self, ExecError> {
        let typed = validate_and_infer_shapes(g, batch)?;
        let mut constants = HashMap::new();
        for w in &g.weights {
            if w.dtype != DType::F32 {
                return Err(ExecError::DtypeMismatch {
                    tensor: w.name.clone(),
                    expected: "F32",
                    actual: w.dtype.as_str(),
                });
            }
            constants.insert(w.name.clone(), TensorData::F32(g.weight_f32(&w.name)?));
        }
        let mut steps = Vec::new();
        let seq = Parallelism::sequential();
        for &i in &typed.order {
            let node = &g.nodes[i];
            if !node.inputs.is_empty() && node.inputs.iter().all(|t| constants.contains_key(t)) {
                let args: Vec<&TensorData> = node.inputs.iter().map(|t| &constants[t]).collect();
                let out = eval_node(&typed, node, &args, &seq)?;
                for (name, v) in node.outputs.iter().zip(out) {
                    constants.insert(name.clone(), v);
                }
            } else {
                steps.push(i);
            }
        }

        let mut last_use: HashMap<&str, usize> = HashMap::new();
        for (s, &i) in steps.iter().enumerate() {
            for t in &g.nodes[i].inputs {
                if !constants.contains_key(t) {
                    last_use.insert(t, s);
                }
            }
        }
        let mut frees = vec![Vec::new(); steps.len()];
        for (t, s) in last_use {
            if !g.is_graph_output(t) {
                frees[s].push(t.to_string());
            }
        }

        Ok(Self {
            typed,
            constants,
            steps,
            frees,
            par: Parallelism::sequential(),
        })
    }

    pub fn with_parallelism(mut self, par: Parallelism) -> Self {
        self.par = par;
        self
    }

    pub fn graph(&self) -> &Graph {
        &self.typed.graph
    }

    pub fn typed(&self) -> &TypedGraph {
        &self.typed
    }

    pub fn batch(&self) -> usize {
        self.typed.batch
    }

    /// Value of a weight or folded constant.
    pub fn constant(&self, name: &str) -> Option<&TensorData> {
        self.constants.get(name)
    }

    /// Evaluate the graph; outputs follow the order of the graph's output list.
    pub fn run(&self, inputs: &[&Volume]) -> Result<Vec<Volume>, ExecError> {
        self.run_with(inputs, |_, _| Ok::<(), ExecError>(()))
    }

    /// Evaluate the graph, passing every graph input and every computed tensor
    /// to `visit` as soon as it is produced.
    pub fn run_with<E: From<ExecError>>(
        &self,
        inputs: &[&Volume],
        mut visit: impl FnMut(&str, &TensorData) -> Result<(), E>,
    ) -> Result<Vec<Volume>, E> {
        self.run_with_mut(inputs, |name, data| visit(name, data))
    }

    /// Like [`Fp32Executor::run_with`], but `visit` may replace a computed
    /// tensor (same dtype and length) before later nodes read it.
    pub fn run_with_mut<E: From<ExecError>>(
        &self,
        inputs: &[&Volume],
        mut visit: impl FnMut(&str, &mut TensorData) -> Result<(), E>,
    ) -> Result<Vec<Volume>, E> {
        let g = &self.typed.graph;
        if inputs.len() != g.inputs.len() {
            return Err(ExecError::InputCount {
                expected: g.inputs.len(),
                actual: inputs.len(),
            }
            .into());
        }
        let mut values: HashMap<&str, TensorData> = HashMap::new();
        for (spec, v) in g.inputs.iter().zip(inputs) {
            let expected = spec.concrete_shape(self.typed.batch);
            if v.shape != expected {
                return Err(ExecError::ShapeMismatch(format!(
                    "input `{}` has shape {:?}, expected {:?}",
                    spec.name, v.shape, expected
                ))
                .into());
            }
            v.check_finite(&spec.name)?;
            let mut data = TensorData::F32(v.data.clone());
            visit(&spec.name, &mut data)?;
            check_replacement(&spec.name, v.data.len(), "F32", &data)?;
            values.insert(&spec.name, data);
        }

        for (s, &i) in self.steps.iter().enumerate() {
            let node = &g.nodes[i];
            let out = {
                let mut args = Vec::with_capacity(node.inputs.len());
                for t in &node.inputs {
                    args.push(self.lookup(&values, t)?);
                }
                eval_node(&self.typed, node, &args, &self.par)?
            };
            for (name, mut v) in node.outputs.iter().zip(out) {
                let (len, dtype) = (v.len(), v.dtype_str());
                visit(name, &mut v)?;
                check_replacement(name, len, dtype, &v)?;
                values.insert(name, v);
            }
            for t in &self.frees[s] {
                values.remove(t.as_str());
            }
        }

        let mut outs = Vec::with_capacity(g.outputs.len());
        for spec in &g.outputs {
            let data = self.lookup(&values, &spec.name)?.as_f32(&spec.name)?.to_vec();
            let shape = self.typed.tensors[&spec.name].shape5();
            outs.push(Volume::new(shape, data)?);
        }
        Ok(outs)
    }

    fn lookup<'a>(&'a self, values: &'a HashMap<&str, TensorData>, name: &str) -> Result<&'a TensorData, ExecError> {
        values
            .get(name)
            .or_else(|| self.constants.get(name))
            .ok_or_else(|| ExecError::ShapeMismatch(format!("tensor `{name}` read before it was written")))
    }
}

fn check_replacement(name: &str, len: usize, dtype: &'static str, v: &TensorData) -> Result<(), ExecError> {
    if v.dtype_str() != dtype {
        return Err(ExecError::DtypeMismatch {
            tensor: name.to_string(),
            expected: dtype,
            actual: v.dtype_str(),
        });
    }
    if v.len() != len {
        return Err(ExecError::ShapeMismatch(format!(
            "replacement for `{name}` has {} elements, expected {len}",
            v.len()
        )));
    }
    Ok(())
}

/// One-shot FP32 (or fake-quant) evaluation of a single-input graph.
pub fn execute_fp32(g: &Graph, input: &Volume) -> Result<Vec<Volume>, ExecError> {
    Fp32Executor::new(g, input.shape[0])?.run(&[input])
}

fn shape5(typed: &TypedGraph, name: &str) -> [usize; 5] {
    typed.tensors[name].shape5()
}

fn eval_node(
    typed: &TypedGraph,
    node: &Node,
    args: &[&TensorData],
    par: &Parallelism,
) -> Result<Vec<TensorData>, ExecError> {
    let name = |i: usize| node.inputs[i].as_str();
    let out = match &node.op {
        Op::Conv3D(attrs) => {
            let xs = shape5(typed, name(0));
            let geom = ConvGeometry::new(attrs, [xs[2], xs[3], xs[4]]);
            let x = args[0].as_f32(name(0))?;
            let w = args[1].as_f32(name(1))?;
            let b = match args.get(2) {
                Some(b) => Some(b.as_f32(name(2))?),
                None => None,
            };
            TensorData::F32(conv3d_f32(&geom, xs[0], x, w, b, par))
        }
        Op::ReLU => TensorData::F32(ops::relu(args[0].as_f32(name(0))?)),
        Op::MaxPool3D { kernel, stride } => {
            let s = shape5(typed, name(0));
            match args[0] {
                TensorData::F32(x) => TensorData::F32(ops::maxpool3d(x, s, *kernel, *stride)),
                TensorData::U8(x) => TensorData::U8(ops::maxpool3d(x, s, *kernel, *stride)),
            }
        }
        Op::Upsample3D { scale } => {
            let s = shape5(typed, name(0));
            match args[0] {
                TensorData::F32(x) => TensorData::F32(ops::upsample3d(x, s, *scale)),
                TensorData::U8(x) => TensorData::U8(ops::upsample3d(x, s, *scale)),
            }
        }
        Op::Concat { axis } => match args[0] {
            TensorData::F32(_) => {
                let mut parts = Vec::with_capacity(args.len());
                for (i, a) in args.iter().enumerate() {
                    parts.push((a.as_f32(name(i))?, shape5(typed, name(i))));
                }
                TensorData::F32(ops::concat(&parts, *axis))
            }
            TensorData::U8(_) => {
                let mut parts = Vec::with_capacity(args.len());
                for (i, a) in args.iter().enumerate() {
                    parts.push((a.as_u8(name(i))?, shape5(typed, name(i))));
                }
                TensorData::U8(ops::concat(&parts, *axis))
            }
        },
        Op::Add => TensorData::F32(ops::add(args[0].as_f32(name(0))?, args[1].as_f32(name(1))?)),
        Op::Softmax { axis } => TensorData::F32(ops::softmax(args[0].as_f32(name(0))?, shape5(typed, name(0)), *axis)),
        Op::ArgMax { axis } => TensorData::F32(ops::argmax(args[0].as_f32(name(0))?, shape5(typed, name(0)), *axis)),
        Op::Quantize(p) => TensorData::U8(p.quantize_slice(args[0].as_f32(name(0))?)),
        Op::Dequantize(p) => TensorData::F32(p.dequantize_slice(args[0].as_u8(name(0))?)),
    };
    Ok(vec![out])
}
