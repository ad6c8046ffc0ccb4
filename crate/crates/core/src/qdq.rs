//! Quantize/Dequantize insertion: turns an FP32 graph into a fake-quantized
//! graph that simulates 8-bit (or narrower) numerics in floating point.

use std::collections::{BTreeSet, HashMap, HashSet};

use thiserror::Error;

use crate::calib::{CalibrationTable, QuantParams};
use crate::engine::EnginePlan;
use crate::graph::{validate_and_infer_shapes, Graph, GraphError, Node, Op, OpKind};
use crate::kernels::{execute_fp32, ExecError, Fp32Executor, IntegerOracle, TensorData, Volume};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QdqError {
    #[error("tensor `{0}` is selected for quantization but has no calibration entry")]
    MissingCalibration(String),
    #[error("node `{node}` ({kind}): {reason}")]
    PolicyUnsupportedKind { node: String, kind: OpKind, reason: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Op kinds whose inputs and outputs may be wrapped in QDQ pairs: exactly the
/// kinds the integer engine can execute on codes.
pub const QUANTIZABLE_KINDS: [OpKind; 4] = [OpKind::Conv3D, OpKind::MaxPool3D, OpKind::Upsample3D, OpKind::Concat];

/// Which nodes get QDQ pairs, and at what bit-width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QdqPolicy {
    pub quantize_kinds: BTreeSet<OpKind>,
    pub quantize_weights: bool,
    pub bits: u8,
}

impl Default for QdqPolicy {
    fn default() -> Self {
        Self {
            quantize_kinds: BTreeSet::from([OpKind::Conv3D]),
            quantize_weights: true,
            bits: 8,
        }
    }
}

impl QdqPolicy {
    /// A policy that selects nothing.
    pub fn empty() -> Self {
        Self {
            quantize_kinds: BTreeSet::new(),
            ..Self::default()
        }
    }

    pub fn with_bits(mut self, bits: u8) -> Self {
        self.bits = bits;
        self
    }

    /// Parse a comma-separated kind list such as `Conv3D,MaxPool3D`;
    /// `none` selects nothing.
    pub fn from_kind_list(list: &str, bits: u8) -> Result<Self, String> {
        let mut kinds = BTreeSet::new();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            if item.eq_ignore_ascii_case("none") {
                continue;
            }
            let kind: OpKind = item.parse().map_err(|k| format!("unknown op kind `{k}`"))?;
            if !QUANTIZABLE_KINDS.contains(&kind) {
                return Err(format!("op kind `{kind}` has no integer kernel"));
            }
            kinds.insert(kind);
        }
        Ok(Self {
            quantize_kinds: kinds,
            quantize_weights: true,
            bits,
        })
    }
}

/// Tensors of the original graph that receive QDQ pairs, in first-use order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Selection {
    /// Activation tensors, observed during calibration.
    pub activations: Vec<String>,
    /// Weight tensors, observed once from their stored values.
    pub weights: Vec<String>,
}

impl Selection {
    pub fn is_empty(&self) -> bool {
        self.activations.is_empty() && self.weights.is_empty()
    }
}

fn unsupported(node: &Node, reason: &str) -> QdqError {
    QdqError::PolicyUnsupportedKind {
        node: node.id.clone(),
        kind: node.op.kind(),
        reason: reason.to_string(),
    }
}

/// Resolve which tensors `policy` quantizes in `g`.
///
/// A selected Conv3D contributes its activation input, its weight (when
/// weights are quantized) and its output. When a ReLU is the only reader of a
/// non-output conv result, the ReLU output is quantized instead, so the
/// observed range is post-activation and the engine can fuse the ReLU.
pub fn select_tensors(g: &Graph, policy: &QdqPolicy) -> Result<Selection, QdqError> {
    let mut sel = Selection::default();
    if policy.quantize_kinds.is_empty() {
        return Ok(sel);
    }
    let typed = validate_and_infer_shapes(g, 1)?;
    let producers = g.producers();
    let consumers = g.consumers();
    let mut seen = HashSet::new();

    for &i in &typed.order {
        let node = &g.nodes[i];
        let kind = node.op.kind();
        if !policy.quantize_kinds.contains(&kind) {
            continue;
        }
        if !QUANTIZABLE_KINDS.contains(&kind) {
            return Err(unsupported(node, "kind has no integer kernel"));
        }
        let already_quantized = |t: &str| {
            producers
                .get(t)
                .is_some_and(|&p| matches!(g.nodes[p].op, Op::Dequantize(_)))
        };
        let (acts, weight, out): (Vec<&str>, Option<&str>, &str) = match &node.op {
            Op::Conv3D(_) => {
                let conv_out = node.outputs[0].as_str();
                let out = match consumers.get(conv_out).map(Vec::as_slice) {
                    Some([c]) if !g.is_graph_output(conv_out) && g.nodes[*c].op == Op::ReLU => {
                        g.nodes[*c].outputs[0].as_str()
                    }
                    _ => conv_out,
                };
                let w = policy.quantize_weights.then(|| node.inputs[1].as_str());
                (vec![node.inputs[0].as_str()], w, out)
            }
            _ => (
                node.inputs.iter().map(String::as_str).collect(),
                None,
                node.outputs[0].as_str(),
            ),
        };
        for t in acts.iter().chain(weight.iter()) {
            if already_quantized(t) {
                return Err(unsupported(node, &format!("input `{t}` is already dequantized")));
            }
        }
        for t in acts.into_iter().chain([out]) {
            if g.is_weight(t) {
                return Err(unsupported(node, &format!("activation `{t}` is a stored weight")));
            }
            if seen.insert(t.to_string()) {
                sel.activations.push(t.to_string());
            }
        }
        if let Some(w) = weight {
            if !g.is_weight(w) {
                return Err(unsupported(node, &format!("weight `{w}` is not a stored tensor")));
            }
            if seen.insert(w.to_string()) {
                sel.weights.push(w.to_string());
            }
        }
    }
    Ok(sel)
}

fn qdq_nodes(t: &str, src: String, q: String, dq: String, p: QuantParams) -> [Node; 2] {
    [
        Node {
            id: format!("{t}__quant"),
            op: Op::Quantize(p),
            inputs: vec![src],
            outputs: vec![q.clone()],
        },
        Node {
            id: format!("{t}__dequant"),
            op: Op::Dequantize(p),
            inputs: vec![q],
            outputs: vec![dq],
        },
    ]
}

/// Insert Quantize→Dequantize pairs on every tensor [`select_tensors`] picks,
/// with parameters from `table`.
///
/// A produced tensor `t` is rewritten as `producer → t__raw → Quantize →
/// t__q → Dequantize → t`, so every reader sees the fake-quantized value
/// under the original name. Graph inputs and weights `w` gain
/// `w → w__q → w__dq` ahead of all nodes and their readers are rewired to
/// `w__dq`. Biases are left in F32.
pub fn insert_qdq(g: &Graph, table: &CalibrationTable, policy: &QdqPolicy) -> Result<Graph, QdqError> {
    let sel = select_tensors(g, policy)?;
    if sel.is_empty() {
        return Ok(g.clone());
    }
    let params = |t: &str| table.get(t).ok_or_else(|| QdqError::MissingCalibration(t.to_string()));
    let producers = g.producers();

    let mut nodes = Vec::with_capacity(g.nodes.len() + 2 * (sel.activations.len() + sel.weights.len()));
    let mut rewired: HashMap<&str, String> = HashMap::new();
    let mut produced: HashMap<&str, QuantParams> = HashMap::new();
    for t in sel.activations.iter().chain(&sel.weights) {
        let p = params(t)?;
        if producers.contains_key(t.as_str()) {
            produced.insert(t, p);
        } else {
            let dq = format!("{t}__dq");
            nodes.extend(qdq_nodes(t, t.clone(), format!("{t}__q"), dq.clone(), p));
            rewired.insert(t, dq);
        }
    }
    for node in &g.nodes {
        let mut n = node.clone();
        for input in &mut n.inputs {
            if let Some(r) = rewired.get(input.as_str()) {
                *input = r.clone();
            }
        }
        let mut after = Vec::new();
        for out in &mut n.outputs {
            if let Some(&p) = produced.get(out.as_str()) {
                let t = out.clone();
                let raw = format!("{t}__raw");
                *out = raw.clone();
                after.extend(qdq_nodes(&t, raw, format!("{t}__q"), t.clone(), p));
            }
        }
        nodes.push(n);
        nodes.extend(after);
    }

    let fake = Graph {
        name: g.name.clone(),
        inputs: g.inputs.clone(),
        outputs: g.outputs.clone(),
        nodes,
        weights: g.weights.clone(),
        blob: g.blob.clone(),
    };
    validate_and_infer_shapes(&fake, 1)?;
    Ok(fake)
}

/// Run a fake-quantized graph: FP32 arithmetic with every QDQ pair applying
/// `dequantize(quantize(x))` elementwise.
pub fn execute_fake_quant(g_fake: &Graph, input: &Volume) -> Result<Vec<Volume>, ExecError> {
    execute_fp32(g_fake, input)
}

/// Agreement between the U8 codes of a compiled plan and the codes the fake
/// graph implies for the same tensors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CodeAgreement {
    pub compared: u64,
    pub differing: u64,
    pub max_abs_diff: u32,
}

impl CodeAgreement {
    pub fn fraction_differing(&self) -> f64 {
        if self.compared == 0 {
            0.0
        } else {
            self.differing as f64 / self.compared as f64
        }
    }

    pub fn merge(&self, other: &CodeAgreement) -> CodeAgreement {
        CodeAgreement {
            compared: self.compared + other.compared,
            differing: self.differing + other.differing,
            max_abs_diff: self.max_abs_diff.max(other.max_abs_diff),
        }
    }

    fn add(&mut self, expected: &[u8], real: &[u8]) {
        for (&a, &b) in expected.iter().zip(real) {
            let d = a.abs_diff(b) as u32;
            self.compared += 1;
            self.differing += u64::from(d > 0);
            self.max_abs_diff = self.max_abs_diff.max(d);
        }
    }
}

/// How [`code_agreement`] lines the two executions up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgreementMode {
    /// Run both paths independently; a code that differs early keeps
    /// differing downstream (and may be amplified by finer requantization).
    EndToEnd,
    /// Feed the real codes back into the fake graph at every Quantize output,
    /// so each op is judged on identical inputs.
    PerOp,
}

/// Name of the fake-graph tensor a plan code tensor was derived from: plan
/// names are fake names, optionally suffixed `#q` (integer op output) and
/// `#rq<param>` (requantized copy).
fn fake_source(plan_name: &str) -> &str {
    let mut base = plan_name;
    if let Some(i) = base.rfind("#rq") {
        if base[i + 3..].bytes().all(|b| b.is_ascii_digit()) {
            base = &base[..i];
        }
    }
    base.strip_suffix("#q").unwrap_or(base)
}

/// Compare every U8 tensor of `plan`, as computed by the integer oracle, with
/// the fake graph's value at the same point quantized with the plan tensor's
/// parameters.
pub fn code_agreement(
    g_fake: &Graph,
    plan: &EnginePlan,
    input: &Volume,
    mode: AgreementMode,
) -> Result<CodeAgreement, ExecError> {
    let mut real: HashMap<String, Vec<u8>> = HashMap::new();
    IntegerOracle::new(plan)?.run_with(&[input], |name, data| {
        if let TensorData::U8(codes) = data {
            real.insert(name.to_string(), codes.clone());
        }
        Ok::<(), ExecError>(())
    })?;
    let mut by_source: HashMap<&str, Vec<usize>> = HashMap::new();
    for (id, t) in plan.tensors.iter().enumerate() {
        if real.contains_key(&t.name) {
            by_source.entry(fake_source(&t.name)).or_default().push(id);
        }
    }

    let mut agreement = CodeAgreement::default();
    let mut seen = 0usize;
    Fp32Executor::new(g_fake, input.shape[0])?.run_with_mut(&[input], |name, data| {
        let Some(ids) = by_source.get(name) else {
            return Ok::<(), ExecError>(());
        };
        // The tensor carrying exactly this name first, so its override is in
        // place before derived tensors are compared.
        let mut ids = ids.clone();
        ids.sort_by_key(|&id| plan.tensors[id].name != name);
        for id in ids {
            let t = &plan.tensors[id];
            let p = plan.tensor_params(id);
            let codes = &real[&t.name];
            let expected: Vec<u8> = match &*data {
                TensorData::F32(v) => v.iter().map(|&x| p.quantize_f32(x)).collect(),
                TensorData::U8(fake_codes) => {
                    let from = plan.tensor_id(name).map(|b| plan.tensor_params(b)).unwrap_or(p);
                    if from.same_as(&p) {
                        fake_codes.clone()
                    } else {
                        fake_codes
                            .iter()
                            .map(|&q| p.quantize_f32(from.dequantize_f32(q)))
                            .collect()
                    }
                }
            };
            if expected.len() != codes.len() {
                return Err(ExecError::ShapeMismatch(format!(
                    "`{}`: fake and plan sizes differ",
                    t.name
                )));
            }
            agreement.add(&expected, codes);
            seen += 1;
            if mode == AgreementMode::PerOp && t.name == name && matches!(data, TensorData::U8(_)) {
                *data = TensorData::U8(codes.clone());
            }
        }
        Ok(())
    })?;
    if seen != real.len() {
        return Err(ExecError::InvalidPlan(format!(
            "{} of {} plan code tensors have no fake counterpart",
            real.len() - seen,
            real.len()
        )));
    }
    Ok(agreement)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::{RangeObserver, TableEntry};
    use crate::graph::{ConvAttrs, GraphBuilder};

    fn conv_relu() -> Graph {
        let mut b = GraphBuilder::new("cr");
        let x = b.input("x", 1, [4, 4, 4]);
        let attrs = ConvAttrs {
            kernel: [3; 3],
            stride: [1; 3],
            padding: [1; 3],
            in_channels: 1,
            out_channels: 2,
        };
        let c = b.conv(&x, attrs, &[0.1; 54], Some(&[0.0, 0.5]));
        let r = b.relu(&c);
        b.output(&r);
        b.finish().unwrap()
    }

    fn table_for(names: &[&str]) -> CalibrationTable {
        let mut t = CalibrationTable::default();
        for n in names {
            let o = RangeObserver {
                min_seen: -1.0,
                max_seen: 2.0,
                count: 1,
            };
            t.insert(n, TableEntry::from_observer(&o, o.finalize(8).unwrap()));
        }
        t
    }

    #[test]
    fn conv_relu_gains_three_pairs() {
        let g = conv_relu();
        let sel = select_tensors(&g, &QdqPolicy::default()).unwrap();
        assert_eq!(sel.activations, vec!["x".to_string(), "relu1_out".to_string()]);
        assert_eq!(sel.weights, vec!["conv0.weight".to_string()]);
        let fake = insert_qdq(
            &g,
            &table_for(&["x", "relu1_out", "conv0.weight"]),
            &QdqPolicy::default(),
        )
        .unwrap();
        assert_eq!(fake.nodes.len(), g.nodes.len() + 6);
        assert_eq!(fake.count_kind(OpKind::Quantize), 3);
        assert_eq!(fake.outputs, g.outputs);
        let conv = fake.nodes.iter().find(|n| n.op.kind() == OpKind::Conv3D).unwrap();
        assert_eq!(conv.inputs, vec!["x__dq", "conv0.weight__dq", "conv0.bias"]);
    }

    #[test]
    fn empty_policy_is_identity() {
        let g = conv_relu();
        assert_eq!(
            insert_qdq(&g, &CalibrationTable::default(), &QdqPolicy::empty()).unwrap(),
            g
        );
    }

    #[test]
    fn missing_entry() {
        let g = conv_relu();
        let err = insert_qdq(&g, &table_for(&["relu1_out", "conv0.weight"]), &QdqPolicy::default()).unwrap_err();
        assert_eq!(err, QdqError::MissingCalibration("x".into()));
    }

    #[test]
    fn second_insertion_rejected() {
        let g = conv_relu();
        let table = table_for(&["x", "relu1_out", "conv0.weight"]);
        let fake = insert_qdq(&g, &table, &QdqPolicy::default()).unwrap();
        assert!(matches!(
            insert_qdq(&fake, &table, &QdqPolicy::default()),
            Err(QdqError::PolicyUnsupportedKind { .. })
        ));
    }

    #[test]
    fn unsupported_kind_rejected() {
        let g = conv_relu();
        let policy = QdqPolicy {
            quantize_kinds: BTreeSet::from([OpKind::ReLU]),
            ..QdqPolicy::default()
        };
        assert!(matches!(
            select_tensors(&g, &policy),
            Err(QdqError::PolicyUnsupportedKind { .. })
        ));
        assert!(QdqPolicy::from_kind_list("Conv3D,Add", 8).is_err());
        assert_eq!(QdqPolicy::from_kind_list("Conv3D", 8).unwrap(), QdqPolicy::default());
    }

    #[test]
    fn lossless_params_match_fp32() {
        // Integer data with s = 1, z = 0 is a fixed point of quantize∘dequantize.
        let mut b = GraphBuilder::new("id");
        let x = b.input("x", 1, [1, 1, 4]);
        let y = b.maxpool(&x, 1, 1);
        b.output(&y);
        let g = b.finish().unwrap();
        let policy = QdqPolicy::from_kind_list("MaxPool3D", 8).unwrap();
        let mut table = CalibrationTable::default();
        let o = RangeObserver {
            min_seen: 0.0,
            max_seen: 255.0,
            count: 4,
        };
        for t in ["x", &y] {
            table.insert(t, TableEntry::from_observer(&o, o.finalize(8).unwrap()));
        }
        let fake = insert_qdq(&g, &table, &policy).unwrap();
        let v = Volume::new([1, 1, 1, 1, 4], vec![0.0, 17.0, 254.0, 255.0]).unwrap();
        assert_eq!(execute_fake_quant(&fake, &v).unwrap(), execute_fp32(&g, &v).unwrap());
    }
}
