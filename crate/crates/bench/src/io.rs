//! Small file helpers shared by the pipeline and the CLI.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use voxquant::graph::{parse_model, serialize_model, Graph};

use crate::BenchError;

pub fn read(path: &Path) -> Result<Vec<u8>, BenchError> {
    if !path.exists() {
        return Err(BenchError::MissingArtifact(path.to_path_buf()));
    }
    fs::read(path).map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<(), BenchError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(path, bytes).map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn create_dir(dir: &Path) -> Result<(), BenchError> {
    fs::create_dir_all(dir).map_err(|source| BenchError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, BenchError> {
    serde_json::from_slice(&read(path)?).map_err(|source| BenchError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), BenchError> {
    let mut text = serde_json::to_vec_pretty(value).expect("serializable report");
    text.push(b'\n');
    write(path, &text)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// The weight blob sits next to the model document with a `.bin` extension.
pub fn blob_path(model_path: &Path) -> PathBuf {
    model_path.with_extension("bin")
}

pub fn load_model(path: &Path) -> Result<Graph, BenchError> {
    let doc = read(path)?;
    let blob = read(&blob_path(path))?;
    Ok(parse_model(&doc, &blob)?)
}

/// Writes `path` and its blob; returns the number of bytes written.
pub fn save_model(path: &Path, g: &Graph) -> Result<u64, BenchError> {
    let (doc, blob) = serialize_model(g);
    write(path, &doc)?;
    write(&blob_path(path), &blob)?;
    Ok((doc.len() + blob.len()) as u64)
}
