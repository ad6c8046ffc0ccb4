//! JSON model document plus raw weight blob.
//!
//! ```json
//! {
//!   "name": "net",
//!   "inputs":  [{"name": "x", "dtype": "F32", "shape": ["N", 1, 8, 8, 8]}],
//!   "outputs": [{"name": "y", "dtype": "F32", "shape": ["N", 4, 8, 8, 8]}],
//!   "nodes": [{"id": "conv0", "kind": "Conv3D", "inputs": ["x", "w0"], "outputs": ["y"],
//!              "attrs": {"kernel": [3,3,3], "stride": [1,1,1], "padding": [1,1,1],
//!                        "in_channels": 1, "out_channels": 4}}],
//!   "weights": [{"name": "w0", "dtype": "F32", "shape": [4,1,3,3,3], "offset": 0, "nbytes": 432}]
//! }
//! ```
//!
//! Unknown keys anywhere are rejected.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::shape::check_weight_entry;
use super::{ConvAttrs, DType, Dim, Graph, GraphError, Node, Op, OpKind, TensorSpec, WeightEntry};
use crate::calib::QuantParams;

const DYNAMIC_SYMBOL: &str = "N";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    name: String,
    inputs: Vec<SpecDoc>,
    outputs: Vec<SpecDoc>,
    nodes: Vec<NodeDoc>,
    weights: Vec<WeightDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecDoc {
    name: String,
    dtype: String,
    shape: Vec<DimDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum DimDoc {
    Fixed(u64),
    Symbol(String),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: String,
    kind: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
    #[serde(default)]
    attrs: Map<String, Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightDoc {
    name: String,
    dtype: String,
    shape: Vec<u64>,
    offset: u64,
    nbytes: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvDoc {
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
    in_channels: usize,
    out_channels: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolDoc {
    kernel: [usize; 3],
    stride: [usize; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UpsampleDoc {
    scale: [usize; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AxisDoc {
    axis: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantDoc {
    scale: f64,
    zero_point: i32,
    bits: u8,
}

/// Parse a model document and its weight blob into a structurally checked graph.
///
/// Shape inference is left to [`super::validate_and_infer_shapes`].
pub fn parse_model(model_text: &[u8], weights_blob: &[u8]) -> Result<Graph, GraphError> {
    let doc: ModelDoc = serde_json::from_slice(model_text).map_err(|e| GraphError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;

    let inputs = doc
        .inputs
        .into_iter()
        .map(spec_from_doc)
        .collect::<Result<Vec<_>, _>>()?;
    let outputs = doc
        .outputs
        .into_iter()
        .map(spec_from_doc)
        .collect::<Result<Vec<_>, _>>()?;
    let nodes = doc
        .nodes
        .into_iter()
        .map(node_from_doc)
        .collect::<Result<Vec<_>, _>>()?;
    let weights = doc
        .weights
        .into_iter()
        .map(|w| {
            let dtype = w.dtype.parse::<DType>().map_err(|message| GraphError::BadWeight {
                name: w.name.clone(),
                message,
            })?;
            let shape = w
                .shape
                .iter()
                .map(|&d| usize::try_from(d))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| GraphError::BadWeight {
                    name: w.name.clone(),
                    message: "dimension exceeds platform usize".into(),
                })?;
            Ok(WeightEntry {
                name: w.name,
                dtype,
                shape,
                offset: w.offset,
                nbytes: w.nbytes,
            })
        })
        .collect::<Result<Vec<_>, GraphError>>()?;

    let graph = Graph {
        name: doc.name,
        inputs,
        outputs,
        nodes,
        weights,
        blob: weights_blob.to_vec(),
    };
    check_structure(&graph)?;
    Ok(graph)
}

fn check_structure(g: &Graph) -> Result<(), GraphError> {
    let mut names = HashSet::new();
    for w in &g.weights {
        check_weight_entry(w, g.blob.len() as u64)?;
    }
    let declared = g
        .inputs
        .iter()
        .map(|t| &t.name)
        .chain(g.weights.iter().map(|w| &w.name))
        .chain(g.nodes.iter().flat_map(|n| n.outputs.iter()));
    for name in declared {
        if !names.insert(name.as_str()) {
            return Err(GraphError::DuplicateTensorName(name.clone()));
        }
    }
    let mut ids = HashSet::new();
    for n in &g.nodes {
        if !ids.insert(n.id.as_str()) {
            return Err(GraphError::DuplicateNodeId(n.id.clone()));
        }
    }
    Ok(())
}

fn spec_from_doc(s: SpecDoc) -> Result<TensorSpec, GraphError> {
    let invalid = |message: String| GraphError::InvalidTensorSpec {
        name: s.name.clone(),
        message,
    };
    let dtype = s.dtype.parse::<DType>().map_err(invalid)?;
    if s.shape.len() != 5 {
        return Err(invalid(format!("shape has rank {}, expected 5", s.shape.len())));
    }
    let mut shape = [Dim::Dynamic; 5];
    for (slot, d) in shape.iter_mut().zip(&s.shape) {
        *slot = match d {
            DimDoc::Fixed(n) => Dim::Fixed(usize::try_from(*n).map_err(|_| invalid("dimension too large".into()))?),
            DimDoc::Symbol(sym) if sym == DYNAMIC_SYMBOL => Dim::Dynamic,
            DimDoc::Symbol(sym) => return Err(invalid(format!("unknown dimension symbol `{sym}`"))),
        };
    }
    Ok(TensorSpec {
        name: s.name.clone(),
        dtype,
        shape,
    })
}

fn node_from_doc(n: NodeDoc) -> Result<Node, GraphError> {
    let kind = n.kind.parse::<OpKind>().map_err(|kind| GraphError::UnknownOpKind {
        node: n.id.clone(),
        kind,
    })?;
    let attrs = Value::Object(n.attrs);
    let bad = |e: serde_json::Error| GraphError::InvalidAttribute {
        node: n.id.clone(),
        message: e.to_string(),
    };
    let empty = |attrs: &Value| match attrs {
        Value::Object(m) if m.is_empty() => Ok(()),
        _ => Err(GraphError::InvalidAttribute {
            node: n.id.clone(),
            message: format!("{kind} takes no attributes"),
        }),
    };
    let op = match kind {
        OpKind::Conv3D => {
            let c: ConvDoc = serde_json::from_value(attrs).map_err(bad)?;
            Op::Conv3D(ConvAttrs {
                kernel: c.kernel,
                stride: c.stride,
                padding: c.padding,
                in_channels: c.in_channels,
                out_channels: c.out_channels,
            })
        }
        OpKind::ReLU => {
            empty(&attrs)?;
            Op::ReLU
        }
        OpKind::Add => {
            empty(&attrs)?;
            Op::Add
        }
        OpKind::MaxPool3D => {
            let p: PoolDoc = serde_json::from_value(attrs).map_err(bad)?;
            Op::MaxPool3D {
                kernel: p.kernel,
                stride: p.stride,
            }
        }
        OpKind::Upsample3D => {
            let u: UpsampleDoc = serde_json::from_value(attrs).map_err(bad)?;
            Op::Upsample3D { scale: u.scale }
        }
        OpKind::Concat => Op::Concat {
            axis: serde_json::from_value::<AxisDoc>(attrs).map_err(bad)?.axis,
        },
        OpKind::Softmax => Op::Softmax {
            axis: serde_json::from_value::<AxisDoc>(attrs).map_err(bad)?.axis,
        },
        OpKind::ArgMax => Op::ArgMax {
            axis: serde_json::from_value::<AxisDoc>(attrs).map_err(bad)?.axis,
        },
        OpKind::Quantize | OpKind::Dequantize => {
            let q: QuantDoc = serde_json::from_value(attrs).map_err(bad)?;
            let p = QuantParams::new(q.scale, q.zero_point, q.bits).map_err(|e| GraphError::InvalidAttribute {
                node: n.id.clone(),
                message: e.to_string(),
            })?;
            if kind == OpKind::Quantize {
                Op::Quantize(p)
            } else {
                Op::Dequantize(p)
            }
        }
    };
    Ok(Node {
        id: n.id,
        op,
        inputs: n.inputs,
        outputs: n.outputs,
    })
}

fn to_value<T: Serialize>(v: T) -> Map<String, Value> {
    match serde_json::to_value(v).expect("attribute structs serialize") {
        Value::Object(m) => m,
        _ => unreachable!("attribute structs are objects"),
    }
}

fn node_to_doc(n: &Node) -> NodeDoc {
    let attrs = match &n.op {
        Op::Conv3D(a) => to_value(ConvDoc {
            kernel: a.kernel,
            stride: a.stride,
            padding: a.padding,
            in_channels: a.in_channels,
            out_channels: a.out_channels,
        }),
        Op::ReLU | Op::Add => Map::new(),
        Op::MaxPool3D { kernel, stride } => to_value(PoolDoc {
            kernel: *kernel,
            stride: *stride,
        }),
        Op::Upsample3D { scale } => to_value(UpsampleDoc { scale: *scale }),
        Op::Concat { axis } | Op::Softmax { axis } | Op::ArgMax { axis } => to_value(AxisDoc { axis: *axis }),
        Op::Quantize(p) | Op::Dequantize(p) => to_value(QuantDoc {
            scale: p.scale,
            zero_point: p.zero_point,
            bits: p.bits,
        }),
    };
    NodeDoc {
        id: n.id.clone(),
        kind: n.op.kind().as_str().to_string(),
        inputs: n.inputs.clone(),
        outputs: n.outputs.clone(),
        attrs,
    }
}

fn spec_to_doc(s: &TensorSpec) -> SpecDoc {
    SpecDoc {
        name: s.name.clone(),
        dtype: s.dtype.as_str().to_string(),
        shape: s
            .shape
            .iter()
            .map(|d| match d {
                Dim::Dynamic => DimDoc::Symbol(DYNAMIC_SYMBOL.to_string()),
                Dim::Fixed(n) => DimDoc::Fixed(*n as u64),
            })
            .collect(),
    }
}

/// Serialize `g` into `(model document, weight blob)`. Inverse of [`parse_model`].
pub fn serialize_model(g: &Graph) -> (Vec<u8>, Vec<u8>) {
    let doc = ModelDoc {
        name: g.name.clone(),
        inputs: g.inputs.iter().map(spec_to_doc).collect(),
        outputs: g.outputs.iter().map(spec_to_doc).collect(),
        nodes: g.nodes.iter().map(node_to_doc).collect(),
        weights: g
            .weights
            .iter()
            .map(|w| WeightDoc {
                name: w.name.clone(),
                dtype: w.dtype.as_str().to_string(),
                shape: w.shape.iter().map(|&d| d as u64).collect(),
                offset: w.offset,
                nbytes: w.nbytes,
            })
            .collect(),
    };
    let mut text = serde_json::to_vec_pretty(&doc).expect("model document serializes");
    text.push(b'\n');
    (text, g.blob.clone())
}
