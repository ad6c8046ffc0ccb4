//! Volumetric graph IR: tensors, nodes, weight manifest, and the builder used
//! by the model generators and tests.

mod format;
mod shape;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::calib::QuantParams;

pub use format::{parse_model, serialize_model};
pub use shape::{validate_and_infer_shapes, TensorInfo, TypedGraph};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("node `{node}`: unknown op kind `{kind}`")]
    UnknownOpKind { node: String, kind: String },
    #[error("duplicate tensor name `{0}`")]
    DuplicateTensorName(String),
    #[error("duplicate node id `{0}`")]
    DuplicateNodeId(String),
    #[error("weight `{name}` spans [{offset}, {offset}+{nbytes}) but blob has {blob_len} bytes")]
    WeightOutOfBounds {
        name: String,
        offset: u64,
        nbytes: u64,
        blob_len: u64,
    },
    #[error("weight `{name}`: {message}")]
    BadWeight { name: String, message: String },
    #[error("node `{node}`: invalid attributes: {message}")]
    InvalidAttribute { node: String, message: String },
    #[error("cycle detected through node `{0}`")]
    CycleDetected(String),
    #[error("node `{node}`: shape mismatch: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("node `{node}` reads undefined tensor `{tensor}`")]
    DanglingInput { node: String, tensor: String },
    #[error("graph output `{0}` is never produced")]
    DanglingOutput(String),
    #[error("invalid tensor spec `{name}`: {message}")]
    InvalidTensorSpec { name: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    F32,
    U8,
    I32,
    U16,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::U8 => 1,
            DType::U16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::U8 => "U8",
            DType::I32 => "I32",
            DType::U16 => "U16",
        }
    }
}

impl FromStr for DType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "F32" => DType::F32,
            "U8" => DType::U8,
            "I32" => DType::I32,
            "U16" => DType::U16,
            other => return Err(format!("unknown dtype `{other}`")),
        })
    }
}

/// One dimension of a declared tensor shape. Only the batch axis may be dynamic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dim {
    Dynamic,
    Fixed(usize),
}

impl Dim {
    pub fn resolve(self, batch: usize) -> usize {
        match self {
            Dim::Dynamic => batch,
            Dim::Fixed(n) => n,
        }
    }
}

/// Declared graph input or output: `(batch, channels, depth, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub dtype: DType,
    pub shape: [Dim; 5],
}

impl TensorSpec {
    pub fn f32(name: impl Into<String>, channels: usize, spatial: [usize; 3]) -> Self {
        Self {
            name: name.into(),
            dtype: DType::F32,
            shape: [
                Dim::Dynamic,
                Dim::Fixed(channels),
                Dim::Fixed(spatial[0]),
                Dim::Fixed(spatial[1]),
                Dim::Fixed(spatial[2]),
            ],
        }
    }

    pub fn concrete_shape(&self, batch: usize) -> [usize; 5] {
        self.shape.map(|d| d.resolve(batch))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Conv3D,
    ReLU,
    MaxPool3D,
    Upsample3D,
    Concat,
    Add,
    Softmax,
    ArgMax,
    Quantize,
    Dequantize,
}

impl OpKind {
    pub const ALL: [OpKind; 10] = [
        OpKind::Conv3D,
        OpKind::ReLU,
        OpKind::MaxPool3D,
        OpKind::Upsample3D,
        OpKind::Concat,
        OpKind::Add,
        OpKind::Softmax,
        OpKind::ArgMax,
        OpKind::Quantize,
        OpKind::Dequantize,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Conv3D => "Conv3D",
            OpKind::ReLU => "ReLU",
            OpKind::MaxPool3D => "MaxPool3D",
            OpKind::Upsample3D => "Upsample3D",
            OpKind::Concat => "Concat",
            OpKind::Add => "Add",
            OpKind::Softmax => "Softmax",
            OpKind::ArgMax => "ArgMax",
            OpKind::Quantize => "Quantize",
            OpKind::Dequantize => "Dequantize",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OpKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| s.to_string())
    }
}

/// Convolution attributes. Inputs are positional: `[x, weight, bias?]`, with
/// the weight laid out `(out, in, kd, kh, kw)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvAttrs {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvAttrs {
    pub fn weight_shape(&self) -> Vec<usize> {
        vec![
            self.out_channels,
            self.in_channels,
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
        ]
    }

    /// Reduction length of one output element.
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Conv3D(ConvAttrs),
    ReLU,
    MaxPool3D {
        kernel: [usize; 3],
        stride: [usize; 3],
    },
    /// Nearest-neighbour upsampling by an integer factor per spatial axis.
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
    /// Index of the maximum along `axis`, emitted as an F32 tensor with that axis collapsed to 1.
    ArgMax {
        axis: usize,
    },
    Quantize(QuantParams),
    Dequantize(QuantParams),
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Conv3D(_) => OpKind::Conv3D,
            Op::ReLU => OpKind::ReLU,
            Op::MaxPool3D { .. } => OpKind::MaxPool3D,
            Op::Upsample3D { .. } => OpKind::Upsample3D,
            Op::Concat { .. } => OpKind::Concat,
            Op::Add => OpKind::Add,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::ArgMax { .. } => OpKind::ArgMax,
            Op::Quantize(_) => OpKind::Quantize,
            Op::Dequantize(_) => OpKind::Dequantize,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub op: Op,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

/// Manifest entry locating one weight tensor inside the sidecar blob.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

impl WeightEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub name: String,
    pub inputs: Vec<TensorSpec>,
    pub outputs: Vec<TensorSpec>,
    pub nodes: Vec<Node>,
    pub weights: Vec<WeightEntry>,
    /// Raw little-endian weight payload referenced by `weights`.
    pub blob: Vec<u8>,
}

impl Graph {
    pub fn weight(&self, name: &str) -> Option<&WeightEntry> {
        self.weights.iter().find(|w| w.name == name)
    }

    pub fn is_weight(&self, name: &str) -> bool {
        self.weight(name).is_some()
    }

    pub fn weight_bytes(&self, name: &str) -> Option<&[u8]> {
        let w = self.weight(name)?;
        let start = usize::try_from(w.offset).ok()?;
        let end = start.checked_add(usize::try_from(w.nbytes).ok()?)?;
        self.blob.get(start..end)
    }

    /// Decode an F32 weight.
    pub fn weight_f32(&self, name: &str) -> Result<Vec<f32>, GraphError> {
        let entry = self.weight(name).ok_or_else(|| GraphError::BadWeight {
            name: name.to_string(),
            message: "not in manifest".into(),
        })?;
        if entry.dtype != DType::F32 {
            return Err(GraphError::BadWeight {
                name: name.to_string(),
                message: format!("expected F32, found {}", entry.dtype.as_str()),
            });
        }
        let bytes = self.weight_bytes(name).ok_or_else(|| GraphError::WeightOutOfBounds {
            name: name.to_string(),
            offset: entry.offset,
            nbytes: entry.nbytes,
            blob_len: self.blob.len() as u64,
        })?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// Total number of stored weight elements.
    pub fn param_count(&self) -> usize {
        self.weights.iter().map(WeightEntry::numel).sum()
    }

    /// Node index producing each tensor.
    pub fn producers(&self) -> HashMap<&str, usize> {
        let mut map = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for o in &n.outputs {
                map.insert(o.as_str(), i);
            }
        }
        map
    }

    /// Node indices reading each tensor, in declaration order.
    pub fn consumers(&self) -> HashMap<&str, Vec<usize>> {
        let mut map: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for t in &n.inputs {
                map.entry(t.as_str()).or_default().push(i);
            }
        }
        map
    }

    pub fn is_graph_input(&self, name: &str) -> bool {
        self.inputs.iter().any(|t| t.name == name)
    }

    pub fn is_graph_output(&self, name: &str) -> bool {
        self.outputs.iter().any(|t| t.name == name)
    }

    pub fn count_kind(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }
}

/// Incremental construction of F32 graphs with weights appended to the blob
/// in declaration order.
#[derive(Debug)]
pub struct GraphBuilder {
    graph: Graph,
    counter: usize,
}

impl GraphBuilder {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            graph: Graph {
                name: name.into(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                nodes: Vec::new(),
                weights: Vec::new(),
                blob: Vec::new(),
            },
            counter: 0,
        }
    }

    pub fn input(&mut self, name: &str, channels: usize, spatial: [usize; 3]) -> String {
        self.graph.inputs.push(TensorSpec::f32(name, channels, spatial));
        name.to_string()
    }

    pub fn add_weight(&mut self, name: &str, shape: Vec<usize>, values: &[f32]) -> String {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let offset = self.graph.blob.len() as u64;
        for v in values {
            self.graph.blob.extend_from_slice(&v.to_le_bytes());
        }
        self.graph.weights.push(WeightEntry {
            name: name.to_string(),
            dtype: DType::F32,
            shape,
            offset,
            nbytes: (values.len() * 4) as u64,
        });
        name.to_string()
    }

    fn fresh(&mut self, prefix: &str) -> String {
        let id = format!("{prefix}{}", self.counter);
        self.counter += 1;
        id
    }

    pub fn node(&mut self, op: Op, inputs: &[&str]) -> String {
        let id = self.fresh(&op.kind().as_str().to_ascii_lowercase());
        let out = format!("{id}_out");
        self.graph.nodes.push(Node {
            id,
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: vec![out.clone()],
        });
        out
    }

    /// Conv3D with `weights` in `(out, in, kd, kh, kw)` order.
    pub fn conv(&mut self, x: &str, attrs: ConvAttrs, weights: &[f32], bias: Option<&[f32]>) -> String {
        let id = self.fresh("conv");
        let w = self.add_weight(&format!("{id}.weight"), attrs.weight_shape(), weights);
        let mut inputs = vec![x.to_string(), w];
        if let Some(b) = bias {
            inputs.push(self.add_weight(&format!("{id}.bias"), vec![attrs.out_channels], b));
        }
        let out = format!("{id}_out");
        self.graph.nodes.push(Node {
            id,
            op: Op::Conv3D(attrs),
            inputs,
            outputs: vec![out.clone()],
        });
        out
    }

    pub fn relu(&mut self, x: &str) -> String {
        self.node(Op::ReLU, &[x])
    }

    pub fn maxpool(&mut self, x: &str, kernel: usize, stride: usize) -> String {
        self.node(
            Op::MaxPool3D {
                kernel: [kernel; 3],
                stride: [stride; 3],
            },
            &[x],
        )
    }

    pub fn upsample(&mut self, x: &str, scale: usize) -> String {
        self.node(Op::Upsample3D { scale: [scale; 3] }, &[x])
    }

    pub fn concat(&mut self, xs: &[&str], axis: usize) -> String {
        self.node(Op::Concat { axis }, xs)
    }

    /// Mark `tensor` as a graph output; shapes are filled in by [`GraphBuilder::finish`].
    pub fn output(&mut self, tensor: &str) {
        self.graph.outputs.push(TensorSpec {
            name: tensor.to_string(),
            dtype: DType::F32,
            shape: [Dim::Dynamic; 5],
        });
    }

    /// Infer output specs and return the validated graph.
    pub fn finish(mut self) -> Result<Graph, GraphError> {
        let typed = shape::infer_tensors(&self.graph, 1, false)?;
        for out in &mut self.graph.outputs {
            let info = typed
                .get(&out.name)
                .ok_or_else(|| GraphError::DanglingOutput(out.name.clone()))?;
            out.dtype = info.dtype;
            let s = &info.shape;
            out.shape = [
                Dim::Dynamic,
                Dim::Fixed(s[1]),
                Dim::Fixed(s[2]),
                Dim::Fixed(s[3]),
                Dim::Fixed(s[4]),
            ];
        }
        validate_and_infer_shapes(&self.graph, 1)?;
        Ok(self.graph)
    }
}
