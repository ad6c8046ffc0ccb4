use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{params_for_range, CalibError, HistogramObserver, QuantParams, RangeObserver};
use crate::graph::Graph;
use crate::kernels::{Fp32Executor, TensorData, Volume};
use crate::qdq::{select_tensors, QdqPolicy, Selection};

/// How observed activations become a quantization range.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum CalibMethod {
    /// Global min and max over the dataset.
    #[default]
    MinMax,
    /// Clip to the central `p` percent of the observed mass (`50 < p ≤ 100`).
    Percentile(f64),
}

/// One row of a calibration table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub min: f64,
    pub max: f64,
    pub count: u64,
    pub scale: f64,
    pub zero_point: i32,
    pub bits: u8,
}

impl TableEntry {
    pub fn new(min: f64, max: f64, count: u64, p: QuantParams) -> Self {
        Self {
            min,
            max,
            count,
            scale: p.scale,
            zero_point: p.zero_point,
            bits: p.bits,
        }
    }

    pub fn from_observer(o: &RangeObserver, p: QuantParams) -> Self {
        Self::new(o.min_seen, o.max_seen, o.count, p)
    }

    pub fn params(&self) -> QuantParams {
        QuantParams {
            scale: self.scale,
            zero_point: self.zero_point,
            bits: self.bits,
        }
    }
}

/// Tensor name → range and quantization parameters. Serialized as a JSON object
/// with keys in sorted order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CalibrationTable {
    entries: BTreeMap<String, TableEntry>,
}

impl CalibrationTable {
    pub fn insert(&mut self, name: &str, entry: TableEntry) {
        self.entries.insert(name.to_string(), entry);
    }

    pub fn get(&self, name: &str) -> Option<QuantParams> {
        self.entries.get(name).map(TableEntry::params)
    }

    pub fn entry(&self, name: &str) -> Option<&TableEntry> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TableEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    /// Parse and check that every entry carries valid parameters.
    pub fn from_json(text: &str) -> Result<Self, CalibError> {
        let t: Self = serde_json::from_str(text).map_err(|e| CalibError::BadTable(e.to_string()))?;
        for (name, e) in &t.entries {
            e.params()
                .validate()
                .map_err(|err| CalibError::BadTable(format!("`{name}`: {err}")))?;
        }
        Ok(t)
    }
}

/// Per-tensor activation ranges from one shard of the calibration data.
/// Shards merge associatively and commutatively.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivationRanges {
    pub observers: BTreeMap<String, RangeObserver>,
    pub samples: usize,
}

impl ActivationRanges {
    pub fn merge(&self, other: &ActivationRanges) -> ActivationRanges {
        let mut observers = self.observers.clone();
        for (k, o) in &other.observers {
            let merged = observers.get(k).map_or(*o, |mine| mine.merge(o));
            observers.insert(k.clone(), merged);
        }
        ActivationRanges {
            observers,
            samples: self.samples + other.samples,
        }
    }
}

/// Histograms over the merged ranges, for percentile clipping.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HistogramStats {
    pub histograms: BTreeMap<String, HistogramObserver>,
}

impl HistogramStats {
    pub fn merge(&self, other: &HistogramStats) -> HistogramStats {
        let mut histograms = self.histograms.clone();
        for (k, h) in &other.histograms {
            match histograms.get_mut(k) {
                Some(mine) => mine.merge(h),
                None => {
                    histograms.insert(k.clone(), h.clone());
                }
            }
        }
        HistogramStats { histograms }
    }
}

/// Run the FP32 graph over `dataset` and hand every selected activation to
/// `observe`. Executors are cached per batch size.
fn for_each_activation(
    g: &Graph,
    dataset: &[Volume],
    wanted: &[String],
    mut observe: impl FnMut(&str, &[f32]) -> Result<(), CalibError>,
) -> Result<(), CalibError> {
    if g.inputs.len() != 1 {
        return Err(crate::kernels::ExecError::InputCount {
            expected: 1,
            actual: g.inputs.len(),
        }
        .into());
    }
    let spec = &g.inputs[0];
    let mut executors: BTreeMap<usize, Fp32Executor> = BTreeMap::new();
    for (index, v) in dataset.iter().enumerate() {
        let expected = spec.concrete_shape(v.shape[0]);
        if v.shape != expected || v.shape[0] == 0 {
            return Err(CalibError::InputShapeMismatch {
                index,
                expected,
                actual: v.shape,
            });
        }
        let exec = match executors.entry(v.shape[0]) {
            std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::btree_map::Entry::Vacant(e) => e.insert(Fp32Executor::new(g, v.shape[0])?),
        };
        exec.run_with(&[v], |name, data| {
            if wanted.iter().any(|w| w == name) {
                if let TensorData::F32(values) = data {
                    observe(name, values)?;
                }
            }
            Ok::<(), CalibError>(())
        })?;
    }
    Ok(())
}

/// Min/max of each selected activation over one shard. An empty shard gives
/// empty ranges.
pub fn collect_ranges(g: &Graph, dataset: &[Volume], selection: &Selection) -> Result<ActivationRanges, CalibError> {
    let mut observers: BTreeMap<String, RangeObserver> = selection
        .activations
        .iter()
        .map(|t| (t.clone(), RangeObserver::new()))
        .collect();
    for_each_activation(g, dataset, &selection.activations, |name, values| {
        observers.get_mut(name).expect("selected").observe(name, values)
    })?;
    Ok(ActivationRanges {
        observers,
        samples: dataset.len(),
    })
}

/// Second calibration pass: histograms over the merged global ranges.
pub fn collect_histograms(
    g: &Graph,
    dataset: &[Volume],
    ranges: &ActivationRanges,
) -> Result<HistogramStats, CalibError> {
    let mut histograms: BTreeMap<String, HistogramObserver> = ranges
        .observers
        .iter()
        .filter(|(_, o)| !o.is_empty())
        .map(|(k, o)| (k.clone(), HistogramObserver::new(o.min_seen, o.max_seen)))
        .collect();
    let wanted: Vec<String> = histograms.keys().cloned().collect();
    for_each_activation(g, dataset, &wanted, |name, values| {
        histograms.get_mut(name).expect("selected").observe(values);
        Ok(())
    })?;
    Ok(HistogramStats { histograms })
}

/// Turn merged statistics into a table. Weights in `selection` are observed
/// here from their stored values. With `percentile`, activation ranges are
/// clipped using `histograms`; weights always use their full range.
pub fn finalize_table(
    g: &Graph,
    selection: &Selection,
    ranges: &ActivationRanges,
    histograms: Option<(&HistogramStats, f64)>,
    bits: u8,
) -> Result<CalibrationTable, CalibError> {
    let mut table = CalibrationTable::default();
    for t in &selection.activations {
        let o = ranges.observers.get(t).copied().unwrap_or_default();
        if o.is_empty() {
            return Err(CalibError::MissingTensor(t.clone()));
        }
        let entry = match histograms {
            Some((stats, p)) => {
                let h = stats
                    .histograms
                    .get(t)
                    .ok_or_else(|| CalibError::MissingTensor(t.clone()))?;
                let (lo, hi) = h.clipped_range(p);
                TableEntry::new(lo, hi, o.count, params_for_range(lo, hi, bits)?)
            }
            None => TableEntry::from_observer(&o, o.finalize(bits)?),
        };
        table.insert(t, entry);
    }
    for w in &selection.weights {
        let mut o = RangeObserver::new();
        o.observe(w, &g.weight_f32(w)?)?;
        if o.is_empty() {
            return Err(CalibError::MissingTensor(w.clone()));
        }
        table.insert(w, TableEntry::from_observer(&o, o.finalize(bits)?));
    }
    Ok(table)
}

/// Full calibration: select tensors with `policy`, observe them over
/// `dataset` and derive parameters at `policy.bits`.
pub fn calibrate_graph(
    g: &Graph,
    dataset: &[Volume],
    policy: &QdqPolicy,
    method: CalibMethod,
) -> Result<CalibrationTable, CalibError> {
    if dataset.is_empty() {
        return Err(CalibError::EmptyDataset);
    }
    if let CalibMethod::Percentile(p) = method {
        if !(p > 50.0 && p <= 100.0) {
            return Err(CalibError::InvalidParams(format!("percentile {p} outside (50, 100]")));
        }
    }
    let selection = select_tensors(g, policy)?;
    let ranges = collect_ranges(g, dataset, &selection)?;
    match method {
        CalibMethod::MinMax => finalize_table(g, &selection, &ranges, None, policy.bits),
        CalibMethod::Percentile(p) => {
            let hist = collect_histograms(g, dataset, &ranges)?;
            finalize_table(g, &selection, &ranges, Some((&hist, p)), policy.bits)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ConvAttrs, GraphBuilder};

    fn pool_graph() -> Graph {
        let mut b = GraphBuilder::new("p");
        let x = b.input("x", 1, [2, 2, 2]);
        let y = b.maxpool(&x, 2, 2);
        b.output(&y);
        b.finish().unwrap()
    }

    fn vol(values: Vec<f32>) -> Volume {
        Volume::new([1, 1, 2, 2, 2], values).unwrap()
    }

    #[test]
    fn minmax_spans_all_samples() {
        let g = pool_graph();
        let policy = QdqPolicy::from_kind_list("MaxPool3D", 8).unwrap();
        let data = [vol(vec![0.5; 8]), vol((0..8).map(|i| i as f32 - 2.0).collect())];
        let t = calibrate_graph(&g, &data, &policy, CalibMethod::MinMax).unwrap();
        let e = t.entry("x").unwrap();
        assert_eq!((e.min, e.max, e.count), (-2.0, 5.0, 16));
        let y = t.entry("maxpool3d0_out").unwrap();
        assert_eq!((y.min, y.max, y.count), (0.5, 5.0, 2));
        assert!((e.scale - 7.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn sharded_equals_whole() {
        let g = pool_graph();
        let policy = QdqPolicy::from_kind_list("MaxPool3D", 8).unwrap();
        let sel = select_tensors(&g, &policy).unwrap();
        let data: Vec<Volume> = (0..4)
            .map(|k| vol((0..8).map(|i| (i * k) as f32 - 3.0).collect()))
            .collect();
        let whole = collect_ranges(&g, &data, &sel).unwrap();
        let a = collect_ranges(&g, &data[..1], &sel).unwrap();
        let b = collect_ranges(&g, &data[1..], &sel).unwrap();
        assert_eq!(b.merge(&a), whole);
        assert_eq!(
            finalize_table(&g, &sel, &a.merge(&b), None, 8).unwrap(),
            finalize_table(&g, &sel, &whole, None, 8).unwrap()
        );
    }

    #[test]
    fn empty_and_mismatched_datasets() {
        let g = pool_graph();
        let policy = QdqPolicy::from_kind_list("MaxPool3D", 8).unwrap();
        assert!(matches!(
            calibrate_graph(&g, &[], &policy, CalibMethod::MinMax),
            Err(CalibError::EmptyDataset)
        ));
        let bad = Volume::new([1, 1, 2, 2, 3], vec![0.0; 12]).unwrap();
        assert!(matches!(
            calibrate_graph(&g, &[vol(vec![0.0; 8]), bad], &policy, CalibMethod::MinMax),
            Err(CalibError::InputShapeMismatch { index: 1, .. })
        ));
    }

    #[test]
    fn percentile_clips_outlier() {
        let mut b = GraphBuilder::new("c");
        let x = b.input("x", 1, [10, 10, 10]);
        let attrs = ConvAttrs {
            kernel: [1; 3],
            stride: [1; 3],
            padding: [0; 3],
            in_channels: 1,
            out_channels: 1,
        };
        let y = b.conv(&x, attrs, &[1.0], None);
        b.output(&y);
        let g = b.finish().unwrap();
        let mut values: Vec<f32> = (0..1000).map(|i| (i % 100) as f32 / 100.0).collect();
        values[0] = 1000.0;
        let data = [Volume::new([1, 1, 10, 10, 10], values).unwrap()];
        let policy = QdqPolicy::default();
        let full = calibrate_graph(&g, &data, &policy, CalibMethod::MinMax).unwrap();
        let clipped = calibrate_graph(&g, &data, &policy, CalibMethod::Percentile(99.0)).unwrap();
        assert_eq!(full.entry("x").unwrap().max, 1000.0);
        // Bins are 1000/2048 wide, so the clipped edge lands within a bin of the bulk.
        assert!(clipped.entry("x").unwrap().max < 1.5);
        // Weights are not clipped.
        assert_eq!(clipped.entry("conv0.weight"), full.entry("conv0.weight"));
    }

    #[test]
    fn json_roundtrip() {
        let g = pool_graph();
        let policy = QdqPolicy::from_kind_list("MaxPool3D", 8).unwrap();
        let t = calibrate_graph(
            &g,
            &[vol((0..8).map(|i| i as f32 * 0.37).collect())],
            &policy,
            CalibMethod::MinMax,
        )
        .unwrap();
        assert_eq!(CalibrationTable::from_json(&t.to_json()).unwrap(), t);
        assert!(matches!(
            CalibrationTable::from_json(r#"{"x":{"min":0,"max":1,"count":1,"scale":-1,"zero_point":0,"bits":8}}"#),
            Err(CalibError::BadTable(_))
        ));
    }
}
