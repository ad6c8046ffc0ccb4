//! Structural validation, topological ordering, and shape inference.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};

use super::{DType, Dim, Graph, GraphError, Node, Op};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub dtype: DType,
    pub shape: Vec<usize>,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn nbytes(&self) -> usize {
        self.numel() * self.dtype.size_of()
    }

    /// The shape as a 5-tuple. Panics on non-rank-5 tensors (weights).
    pub fn shape5(&self) -> [usize; 5] {
        self.shape.as_slice().try_into().expect("rank-5 tensor")
    }
}

/// A validated graph with a concrete batch size, a topological node order,
/// and the inferred type of every tensor (inputs, weights, intermediates).
#[derive(Debug, Clone, PartialEq)]
pub struct TypedGraph {
    pub graph: Graph,
    pub batch: usize,
    pub order: Vec<usize>,
    pub tensors: BTreeMap<String, TensorInfo>,
}

impl TypedGraph {
    pub fn info(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.get(name)
    }
}

/// Validate `g` and annotate every tensor with a concrete shape for `batch`.
/// Idempotent: re-validating `result.graph` yields the same annotation.
pub fn validate_and_infer_shapes(g: &Graph, batch: usize) -> Result<TypedGraph, GraphError> {
    let (order, tensors) = infer(g, batch, true)?;
    Ok(TypedGraph {
        graph: g.clone(),
        batch,
        order,
        tensors,
    })
}

pub(super) fn infer_tensors(
    g: &Graph,
    batch: usize,
    check_outputs: bool,
) -> Result<BTreeMap<String, TensorInfo>, GraphError> {
    infer(g, batch, check_outputs).map(|(_, t)| t)
}

pub(crate) fn checked_numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

fn infer(
    g: &Graph,
    batch: usize,
    check_outputs: bool,
) -> Result<(Vec<usize>, BTreeMap<String, TensorInfo>), GraphError> {
    if batch == 0 {
        return Err(GraphError::InvalidTensorSpec {
            name: "<batch>".into(),
            message: "batch must be positive".into(),
        });
    }
    let mut tensors: BTreeMap<String, TensorInfo> = BTreeMap::new();
    let declare = |name: &str, info: TensorInfo, tensors: &mut BTreeMap<String, TensorInfo>| {
        if tensors.insert(name.to_string(), info).is_some() {
            Err(GraphError::DuplicateTensorName(name.to_string()))
        } else {
            Ok(())
        }
    };

    for spec in &g.inputs {
        for (axis, d) in spec.shape.iter().enumerate() {
            match d {
                Dim::Dynamic if axis != 0 => {
                    return Err(GraphError::InvalidTensorSpec {
                        name: spec.name.clone(),
                        message: format!("axis {axis} is dynamic; only batch may be"),
                    })
                }
                Dim::Fixed(0) => {
                    return Err(GraphError::InvalidTensorSpec {
                        name: spec.name.clone(),
                        message: format!("axis {axis} has size 0"),
                    })
                }
                _ => {}
            }
        }
        let shape = spec.concrete_shape(batch).to_vec();
        if checked_numel(&shape).is_none() {
            return Err(GraphError::InvalidTensorSpec {
                name: spec.name.clone(),
                message: "element count overflows".into(),
            });
        }
        declare(
            &spec.name,
            TensorInfo {
                dtype: spec.dtype,
                shape,
            },
            &mut tensors,
        )?;
    }

    for w in &g.weights {
        check_weight_entry(w, g.blob.len() as u64)?;
        declare(
            &w.name,
            TensorInfo {
                dtype: w.dtype,
                shape: w.shape.clone(),
            },
            &mut tensors,
        )?;
    }

    let mut ids = HashSet::new();
    let mut produced: HashMap<&str, usize> = HashMap::new();
    for (i, n) in g.nodes.iter().enumerate() {
        if !ids.insert(n.id.as_str()) {
            return Err(GraphError::DuplicateNodeId(n.id.clone()));
        }
        check_arity(n)?;
        for o in &n.outputs {
            if tensors.contains_key(o) || produced.insert(o.as_str(), i).is_some() {
                return Err(GraphError::DuplicateTensorName(o.clone()));
            }
        }
    }
    for n in &g.nodes {
        for t in &n.inputs {
            if !tensors.contains_key(t) && !produced.contains_key(t.as_str()) {
                return Err(GraphError::DanglingInput {
                    node: n.id.clone(),
                    tensor: t.clone(),
                });
            }
        }
    }

    let order = topo_order(g, &produced)?;

    for &i in &order {
        let n = &g.nodes[i];
        let ins: Vec<&TensorInfo> = n.inputs.iter().map(|t| &tensors[t]).collect();
        let out = infer_node(n, &ins)?;
        tensors.insert(n.outputs[0].clone(), out);
    }

    for spec in &g.outputs {
        let info = tensors
            .get(&spec.name)
            .ok_or_else(|| GraphError::DanglingOutput(spec.name.clone()))?;
        if !check_outputs {
            continue;
        }
        let declared_ok = info.dtype == spec.dtype
            && info.shape.len() == 5
            && spec
                .shape
                .iter()
                .zip(&info.shape)
                .all(|(d, &actual)| matches!(d, Dim::Dynamic) || *d == Dim::Fixed(actual));
        if !declared_ok {
            return Err(GraphError::ShapeMismatch {
                node: format!("<output {}>", spec.name),
                detail: format!(
                    "declared {} {:?}, inferred {} {:?}",
                    spec.dtype.as_str(),
                    spec.shape,
                    info.dtype.as_str(),
                    info.shape
                ),
            });
        }
    }
    Ok((order, tensors))
}

pub(crate) fn check_weight_entry(w: &super::WeightEntry, blob_len: u64) -> Result<(), GraphError> {
    let bad = |message: String| GraphError::BadWeight {
        name: w.name.clone(),
        message,
    };
    if w.shape.is_empty() || w.shape.contains(&0) {
        return Err(bad(format!("invalid shape {:?}", w.shape)));
    }
    let expected = checked_numel(&w.shape)
        .and_then(|n| n.checked_mul(w.dtype.size_of()))
        .ok_or_else(|| bad("element count overflows".into()))?;
    if expected as u64 != w.nbytes {
        return Err(bad(format!(
            "nbytes {} does not match shape {:?} ({} bytes)",
            w.nbytes, w.shape, expected
        )));
    }
    match w.offset.checked_add(w.nbytes) {
        Some(end) if end <= blob_len => Ok(()),
        _ => Err(GraphError::WeightOutOfBounds {
            name: w.name.clone(),
            offset: w.offset,
            nbytes: w.nbytes,
            blob_len,
        }),
    }
}

fn check_arity(n: &Node) -> Result<(), GraphError> {
    let (min, max) = match n.op {
        Op::Conv3D(_) => (2, 3),
        Op::Add => (2, 2),
        Op::Concat { .. } => (1, usize::MAX),
        _ => (1, 1),
    };
    let bad = |detail: String| GraphError::ShapeMismatch {
        node: n.id.clone(),
        detail,
    };
    if n.inputs.len() < min || n.inputs.len() > max {
        return Err(bad(format!(
            "{} takes {min}..={} inputs, got {}",
            n.op.kind(),
            if max == usize::MAX {
                "n".to_string()
            } else {
                max.to_string()
            },
            n.inputs.len()
        )));
    }
    if n.outputs.len() != 1 {
        return Err(bad(format!("expected 1 output, got {}", n.outputs.len())));
    }
    Ok(())
}

/// Kahn's algorithm, always releasing the lowest-indexed ready node first.
fn topo_order(g: &Graph, produced: &HashMap<&str, usize>) -> Result<Vec<usize>, GraphError> {
    let n = g.nodes.len();
    let mut indegree = vec![0usize; n];
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, node) in g.nodes.iter().enumerate() {
        for t in &node.inputs {
            if let Some(&p) = produced.get(t.as_str()) {
                indegree[i] += 1;
                succ[p].push(i);
            }
        }
    }
    let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|&i| indegree[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(i)) = ready.pop() {
        order.push(i);
        for &s in &succ[i] {
            indegree[s] -= 1;
            if indegree[s] == 0 {
                ready.push(Reverse(s));
            }
        }
    }
    if order.len() != n {
        let stuck = (0..n).find(|&i| indegree[i] > 0).unwrap_or(0);
        return Err(GraphError::CycleDetected(g.nodes[stuck].id.clone()));
    }
    Ok(order)
}

fn infer_node(n: &Node, ins: &[&TensorInfo]) -> Result<TensorInfo, GraphError> {
    let mismatch = |detail: String| GraphError::ShapeMismatch {
        node: n.id.clone(),
        detail,
    };
    let attr = |message: &str| GraphError::InvalidAttribute {
        node: n.id.clone(),
        message: message.to_string(),
    };
    let want_act = |i: usize| -> Result<[usize; 5], GraphError> {
        let t = ins[i];
        if t.dtype != DType::F32 {
            return Err(mismatch(format!(
                "input {i} has dtype {}, expected F32",
                t.dtype.as_str()
            )));
        }
        t.shape
            .as_slice()
            .try_into()
            .map_err(|_| mismatch(format!("input {i} has rank {}, expected 5", t.shape.len())))
    };
    let f32_out = |shape: Vec<usize>| -> Result<TensorInfo, GraphError> {
        if checked_numel(&shape).is_none() {
            return Err(mismatch(format!("output shape {shape:?} overflows")));
        }
        Ok(TensorInfo {
            dtype: DType::F32,
            shape,
        })
    };

    match &n.op {
        Op::Conv3D(a) => {
            if a.kernel.contains(&0) || a.stride.contains(&0) || a.in_channels == 0 || a.out_channels == 0 {
                return Err(attr("kernel, stride and channel counts must be positive"));
            }
            let x = want_act(0)?;
            if x[1] != a.in_channels {
                return Err(mismatch(format!(
                    "input has {} channels, attribute says {}",
                    x[1], a.in_channels
                )));
            }
            let w = ins[1];
            if w.dtype != DType::F32 || w.shape != a.weight_shape() {
                return Err(mismatch(format!(
                    "weight is {} {:?}, expected F32 {:?}",
                    w.dtype.as_str(),
                    w.shape,
                    a.weight_shape()
                )));
            }
            if let Some(b) = ins.get(2) {
                if b.dtype != DType::F32 || b.shape != [a.out_channels] {
                    return Err(mismatch(format!(
                        "bias is {} {:?}, expected F32 [{}]",
                        b.dtype.as_str(),
                        b.shape,
                        a.out_channels
                    )));
                }
            }
            let mut out = vec![x[0], a.out_channels, 0, 0, 0];
            for ax in 0..3 {
                let padded = x[ax + 2]
                    .checked_add(2 * a.padding[ax])
                    .ok_or_else(|| mismatch("padding overflows".into()))?;
                if padded < a.kernel[ax] {
                    return Err(mismatch(format!(
                        "axis {} has padded extent {padded} smaller than kernel {}",
                        ax + 2,
                        a.kernel[ax]
                    )));
                }
                out[ax + 2] = (padded - a.kernel[ax]) / a.stride[ax] + 1;
            }
            f32_out(out)
        }
        Op::ReLU => f32_out(want_act(0)?.to_vec()),
        Op::MaxPool3D { kernel, stride } => {
            if kernel.contains(&0) || stride.contains(&0) {
                return Err(attr("kernel and stride must be positive"));
            }
            let x = want_act(0)?;
            let mut out = x.to_vec();
            for ax in 0..3 {
                if x[ax + 2] < kernel[ax] {
                    return Err(mismatch(format!(
                        "axis {} extent {} smaller than pool window {}",
                        ax + 2,
                        x[ax + 2],
                        kernel[ax]
                    )));
                }
                out[ax + 2] = (x[ax + 2] - kernel[ax]) / stride[ax] + 1;
            }
            f32_out(out)
        }
        Op::Upsample3D { scale } => {
            if scale.contains(&0) {
                return Err(attr("scale must be positive"));
            }
            let x = want_act(0)?;
            let mut out = x.to_vec();
            for ax in 0..3 {
                out[ax + 2] = x[ax + 2]
                    .checked_mul(scale[ax])
                    .ok_or_else(|| mismatch("upsampled extent overflows".into()))?;
            }
            f32_out(out)
        }
        Op::Concat { axis } => {
            if *axis >= 5 {
                return Err(attr("concat axis must be < 5"));
            }
            let first = want_act(0)?;
            let mut out = first.to_vec();
            for i in 1..ins.len() {
                let s = want_act(i)?;
                for ax in 0..5 {
                    if ax != *axis && s[ax] != first[ax] {
                        return Err(mismatch(format!(
                            "input {i} shape {s:?} disagrees with {first:?} on axis {ax}"
                        )));
                    }
                }
                out[*axis] = out[*axis]
                    .checked_add(s[*axis])
                    .ok_or_else(|| mismatch("concat extent overflows".into()))?;
            }
            f32_out(out)
        }
        Op::Add => {
            let a = want_act(0)?;
            let b = want_act(1)?;
            if a != b {
                return Err(mismatch(format!("operands {a:?} and {b:?} differ")));
            }
            f32_out(a.to_vec())
        }
        Op::Softmax { axis } => {
            if *axis >= 5 {
                return Err(attr("softmax axis must be < 5"));
            }
            f32_out(want_act(0)?.to_vec())
        }
        Op::ArgMax { axis } => {
            if *axis >= 5 {
                return Err(attr("argmax axis must be < 5"));
            }
            let mut out = want_act(0)?.to_vec();
            out[*axis] = 1;
            f32_out(out)
        }
        Op::Quantize(p) => {
            p.validate().map_err(|e| attr(&e.to_string()))?;
            if ins[0].dtype != DType::F32 {
                return Err(mismatch(format!(
                    "Quantize consumes F32, got {}",
                    ins[0].dtype.as_str()
                )));
            }
            Ok(TensorInfo {
                dtype: DType::U8,
                shape: ins[0].shape.clone(),
            })
        }
        Op::Dequantize(p) => {
            p.validate().map_err(|e| attr(&e.to_string()))?;
            if ins[0].dtype != DType::U8 {
                return Err(mismatch(format!(
                    "Dequantize consumes U8, got {}",
                    ins[0].dtype.as_str()
                )));
            }
            Ok(TensorInfo {
                dtype: DType::F32,
                shape: ins[0].shape.clone(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ConvAttrs, GraphBuilder};

    fn conv_graph(spatial: usize, kernel: usize, stride: usize, padding: usize, out: usize) -> Graph {
        let mut b = GraphBuilder::new("t");
        let x = b.input("x", 1, [spatial; 3]);
        let attrs = ConvAttrs {
            kernel: [kernel; 3],
            stride: [stride; 3],
            padding: [padding; 3],
            in_channels: 1,
            out_channels: out,
        };
        let w = vec![0.0; out * kernel.pow(3)];
        let y = b.conv(&x, attrs, &w, None);
        b.output(&y);
        b.finish().unwrap()
    }

    #[test]
    fn same_padding_conv() {
        let g = conv_graph(8, 3, 1, 1, 4);
        let t = validate_and_infer_shapes(&g, 1).unwrap();
        assert_eq!(t.info("conv0_out").unwrap().shape, vec![1, 4, 8, 8, 8]);
    }

    #[test]
    fn strided_conv_floor() {
        let g = conv_graph(9, 3, 2, 0, 2);
        let t = validate_and_infer_shapes(&g, 1).unwrap();
        // floor((9 - 3) / 2) + 1 = 4
        assert_eq!(t.info("conv0_out").unwrap().shape, vec![1, 2, 4, 4, 4]);
    }

    #[test]
    fn add_shape_mismatch() {
        let mut b = GraphBuilder::new("t");
        let x = b.input("x", 4, [8, 8, 8]);
        let y = b.input("y", 4, [8, 8, 4]);
        let z = b.node(Op::Add, &[&x, &y]);
        b.output(&z);
        let err = b.finish().unwrap_err();
        assert!(
            matches!(err, GraphError::ShapeMismatch { ref node, .. } if node == "add0"),
            "{err}"
        );
    }

    #[test]
    fn cycle_detected() {
        let mut b = GraphBuilder::new("t");
        let x = b.input("x", 1, [4, 4, 4]);
        let mut g = {
            let r = b.relu(&x);
            b.output(&r);
            b.finish().unwrap()
        };
        g.nodes.push(Node {
            id: "a".into(),
            op: Op::ReLU,
            inputs: vec!["b_out".into()],
            outputs: vec!["a_out".into()],
        });
        g.nodes.push(Node {
            id: "b".into(),
            op: Op::ReLU,
            inputs: vec!["a_out".into()],
            outputs: vec!["b_out".into()],
        });
        assert!(matches!(
            validate_and_infer_shapes(&g, 1),
            Err(GraphError::CycleDetected(_))
        ));
    }

    #[test]
    fn dangling_input() {
        let mut b = GraphBuilder::new("t");
        let x = b.input("x", 1, [4, 4, 4]);
        let r = b.relu(&x);
        b.output(&r);
        let mut g = b.finish().unwrap();
        g.nodes[0].inputs[0] = "ghost".into();
        assert!(matches!(
            validate_and_infer_shapes(&g, 1),
            Err(GraphError::DanglingInput { ref tensor, .. }) if tensor == "ghost"
        ));
    }

    #[test]
    fn idempotent_and_order_independent() {
        let mut b = GraphBuilder::new("t");
        let x = b.input("x", 2, [8, 8, 8]);
        let p = b.maxpool(&x, 2, 2);
        let u = b.upsample(&p, 2);
        let c = b.concat(&[&x, &u], 1);
        let r = b.relu(&c);
        b.output(&r);
        let g = b.finish().unwrap();
        let t1 = validate_and_infer_shapes(&g, 2).unwrap();
        let t2 = validate_and_infer_shapes(&t1.graph, 2).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(t1.info(&c).unwrap().shape, vec![2, 4, 8, 8, 8]);

        let mut shuffled = g.clone();
        shuffled.nodes.reverse();
        let t3 = validate_and_infer_shapes(&shuffled, 2).unwrap();
        assert_eq!(t1.tensors, t3.tensors);
    }

    #[test]
    fn zero_stride_is_rejected_not_panicking() {
        let mut g = conv_graph(8, 3, 1, 1, 1);
        if let Op::Conv3D(a) = &mut g.nodes[0].op {
            a.stride = [0, 1, 1];
        }
        assert!(matches!(
            validate_and_infer_shapes(&g, 1),
            Err(GraphError::InvalidAttribute { .. })
        ));
    }
}
