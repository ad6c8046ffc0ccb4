use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::format::layout;
use super::{deserialize_engine, EngineError};
use crate::graph::{serialize_model, validate_and_infer_shapes, Graph, TypedGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionSizes {
    pub header: u64,
    pub plan: u64,
    pub params: u64,
    pub weights: u64,
    pub biases: u64,
    pub checksum: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    /// Model document plus weight blob.
    pub fp32_bytes: u64,
    pub engine_bytes: u64,
    /// `fp32_bytes / engine_bytes`.
    pub compression_ratio: f64,
    pub sections: SectionSizes,
    pub fp32_workspace_bytes: u64,
    pub int8_workspace_bytes: u64,
}

/// Compare a serialized FP32 model against an engine file built from it.
pub fn engine_size_report(fp32_model: &Graph, engine: &[u8]) -> Result<SizeReport, EngineError> {
    let plan = deserialize_engine(engine)?;
    let (doc, blob) = serialize_model(fp32_model);
    let fp32_bytes = (doc.len() + blob.len()) as u64;
    let l = layout(&plan);
    let typed = validate_and_infer_shapes(fp32_model, plan.batch)?;
    Ok(SizeReport {
        fp32_bytes,
        engine_bytes: engine.len() as u64,
        compression_ratio: fp32_bytes as f64 / engine.len() as f64,
        sections: SectionSizes {
            header: l.header as u64,
            plan: l.plan as u64,
            params: l.params as u64,
            weights: l.weights as u64,
            biases: l.biases as u64,
            checksum: l.checksum as u64,
        },
        fp32_workspace_bytes: graph_workspace_bytes(&typed),
        int8_workspace_bytes: plan.workspace_bytes,
    })
}

/// Peak live activation bytes when executing `typed` node by node, with the
/// same liveness rules as engine plans. Weights and graph inputs are excluded.
pub fn graph_workspace_bytes(typed: &TypedGraph) -> u64 {
    let g = &typed.graph;
    let steps = typed.order.len();
    let mut def: HashMap<&str, usize> = HashMap::new();
    let mut last: HashMap<&str, usize> = HashMap::new();
    for (s, &i) in typed.order.iter().enumerate() {
        let node = &g.nodes[i];
        for t in &node.inputs {
            last.insert(t, s);
        }
        for t in &node.outputs {
            def.insert(t, s);
        }
    }
    for o in &g.outputs {
        last.insert(&o.name, steps);
    }
    let mut delta = vec![0i64; steps + 2];
    for (t, &s) in &def {
        let end = last.get(t).copied().unwrap_or(s).max(s);
        let n = typed.tensors[*t].nbytes() as i64;
        delta[s] += n;
        delta[end + 1] -= n;
    }
    let mut live = 0i64;
    let mut peak = 0i64;
    for d in &delta[..steps] {
        live += d;
        peak = peak.max(live);
    }
    peak as u64
}
