//! calibrate → insert QDQ → build engine, with every artifact and a manifest
//! of hashes written to one directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use voxquant::calib::{calibrate_graph, CalibMethod, CalibrationTable};
use voxquant::engine::{build_engine, serialize_engine, EnginePlan};
use voxquant::graph::{serialize_model, Graph};
use voxquant::kernels::Volume;
use voxquant::qdq::{insert_qdq, QdqPolicy};

use crate::{io, BenchError, Stage};

pub const FP32_MODEL: &str = "fp32.json";
pub const CALIB_TABLE: &str = "calib.json";
pub const FAKE_MODEL: &str = "fake.json";
pub const ENGINE_FILE: &str = "engine.vqe";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub policy: QdqPolicy,
    pub method: CalibMethod,
    /// Seeds that produced the model and data, recorded verbatim in the manifest.
    pub seeds: BTreeMap<String, u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            policy: QdqPolicy::default(),
            method: CalibMethod::MinMax,
            seeds: BTreeMap::new(),
        }
    }
}

pub fn method_name(m: CalibMethod) -> String {
    match m {
        CalibMethod::MinMax => "minmax".into(),
        CalibMethod::Percentile(p) => format!("percentile:{p}"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    /// Artifact name → sha256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub tool: String,
    pub version: String,
    pub model_name: String,
    pub bits: u8,
    pub policy: Vec<String>,
    pub quantize_weights: bool,
    pub calib_method: String,
    pub calib_volumes: usize,
    pub seeds: BTreeMap<String, u64>,
    pub stages: Vec<StageRecord>,
    /// Set when a stage failed; earlier stages' artifacts are still on disk.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutputs {
    pub table: CalibrationTable,
    pub fake: Graph,
    pub plan: EnginePlan,
    pub engine: Vec<u8>,
    pub manifest: PipelineManifest,
}

/// Hash of the calibration inputs: shapes and little-endian values in order.
pub fn volumes_sha256(vs: &[Volume]) -> String {
    let mut bytes = Vec::new();
    for v in vs {
        for d in v.shape {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in &v.data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    io::sha256_hex(&bytes)
}

fn record(stage: Stage, inputs: &[(&str, &[u8])], outputs: &[(&str, &[u8])]) -> StageRecord {
    let map = |xs: &[(&str, &[u8])]| xs.iter().map(|(n, b)| (n.to_string(), io::sha256_hex(b))).collect();
    StageRecord {
        stage: stage.to_string(),
        inputs: map(inputs),
        outputs: map(outputs),
    }
}

/// Runs the three stages into `outdir`: `fp32.json/.bin` (a copy of the input
/// model), `calib.json`, `fake.json/.bin`, `engine.vqe` and `manifest.json`.
/// If building fails, the earlier artifacts and a manifest naming the failed
/// stage are still written.
pub fn run_pipeline(
    model: &Graph,
    calib: &[Volume],
    cfg: &PipelineConfig,
    outdir: &Path,
) -> Result<PipelineOutputs, BenchError> {
    io::create_dir(outdir)?;
    let (model_doc, model_blob) = serialize_model(model);
    let fp32_path = outdir.join(FP32_MODEL);
    io::write(&fp32_path, &model_doc)?;
    io::write(&io::blob_path(&fp32_path), &model_blob)?;
    let data_hash = volumes_sha256(calib);

    let mut manifest = PipelineManifest {
        tool: "voxquant".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        model_name: model.name.clone(),
        bits: cfg.policy.bits,
        policy: cfg
            .policy
            .quantize_kinds
            .iter()
            .map(|k| k.as_str().to_string())
            .collect(),
        quantize_weights: cfg.policy.quantize_weights,
        calib_method: method_name(cfg.method),
        calib_volumes: calib.len(),
        seeds: cfg.seeds.clone(),
        stages: Vec::new(),
        failed_stage: None,
    };
    let fail = |manifest: &mut PipelineManifest, stage: Stage, e: BenchError| -> BenchError {
        manifest.failed_stage = Some(stage.to_string());
        match io::write_json(&outdir.join(MANIFEST), manifest) {
            Ok(()) => e.in_stage(stage),
            Err(w) => w,
        }
    };

    let table = match calibrate_graph(model, calib, &cfg.policy, cfg.method) {
        Ok(t) => t,
        Err(e) => return Err(fail(&mut manifest, Stage::Calibrate, e.into())),
    };
    let table_json = table.to_json();
    io::write(&outdir.join(CALIB_TABLE), table_json.as_bytes())?;
    let mut rec = record(
        Stage::Calibrate,
        &[("fp32.json", &model_doc), ("fp32.bin", &model_blob)],
        &[(CALIB_TABLE, table_json.as_bytes())],
    );
    rec.inputs.insert("calibration-data".into(), data_hash);
    manifest.stages.push(rec);

    let fake = match insert_qdq(model, &table, &cfg.policy) {
        Ok(g) => g,
        Err(e) => return Err(fail(&mut manifest, Stage::Quantize, e.into())),
    };
    let (fake_doc, fake_blob) = serialize_model(&fake);
    let fake_path = outdir.join(FAKE_MODEL);
    io::write(&fake_path, &fake_doc)?;
    io::write(&io::blob_path(&fake_path), &fake_blob)?;
    manifest.stages.push(record(
        Stage::Quantize,
        &[
            ("fp32.json", &model_doc),
            ("fp32.bin", &model_blob),
            (CALIB_TABLE, table_json.as_bytes()),
        ],
        &[(FAKE_MODEL, &fake_doc), ("fake.bin", &fake_blob)],
    ));

    let plan = match build_engine(&fake) {
        Ok(p) => p,
        Err(e) => return Err(fail(&mut manifest, Stage::Build, e.into())),
    };
    let engine = serialize_engine(&plan);
    io::write(&outdir.join(ENGINE_FILE), &engine)?;
    manifest.stages.push(record(
        Stage::Build,
        &[(FAKE_MODEL, &fake_doc), ("fake.bin", &fake_blob)],
        &[(ENGINE_FILE, &engine)],
    ));
    io::write_json(&outdir.join(MANIFEST), &manifest)?;
    Ok(PipelineOutputs {
        table,
        fake,
        plan,
        engine,
        manifest,
    })
}

/// The three models of a finished pipeline directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
    pub fp32: Graph,
    pub fake: Graph,
    pub engine: Vec<u8>,
    pub manifest: PipelineManifest,
}

impl Artifacts {
    pub fn load(dir: &Path) -> Result<Self, BenchError> {
        let manifest: PipelineManifest = io::read_json(&dir.join(MANIFEST))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            fp32: io::load_model(&dir.join(FP32_MODEL))?,
            fake: io::load_model(&dir.join(FAKE_MODEL))?,
            engine: io::read(&dir.join(ENGINE_FILE))?,
            manifest,
        })
    }

    pub fn from_outputs(dir: &Path, model: &Graph, out: &PipelineOutputs) -> Self {
        Self {
            dir: dir.to_path_buf(),
            fp32: model.clone(),
            fake: out.fake.clone(),
            engine: out.engine.clone(),
            manifest: out.manifest.clone(),
        }
    }

    pub fn name(&self) -> &str {
        &self.manifest.model_name
    }
}
