//! Dense 5-D tensors and their raw-plus-sidecar file format.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ExecError;
use crate::calib::QuantParams;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad sidecar: {message}")]
    BadSidecar { path: PathBuf, message: String },
    #[error("{path}: payload has {actual} bytes, sidecar implies {expected}")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: expected dtype {expected}, sidecar says {actual}")]
    DtypeMismatch {
        path: PathBuf,
        expected: &'static str,
        actual: String,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    shape: [usize; 5],
    dtype: String,
}

/// Dense F32 field in `(batch, channel, depth, height, width)` order, width fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub shape: [usize; 5],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: [usize; 5], data: Vec<f32>) -> Result<Self, ExecError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(ExecError::ShapeMismatch(format!(
                "volume shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 5]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn check_finite(&self, tensor: &str) -> Result<(), ExecError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(ExecError::NonFiniteValue(tensor.to_string()))
        }
    }

    /// Class indices from a single-channel prediction volume (e.g. an ArgMax output).
    pub fn to_labels(&self) -> LabelVolume {
        LabelVolume {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|&v| v.round().clamp(0.0, u16::MAX as f32) as u16)
                .collect(),
        }
    }

    pub fn save(&self, raw_path: &Path) -> Result<(), VolumeError> {
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        write_pair(raw_path, &bytes, self.shape, "F32")
    }

    pub fn load(raw_path: &Path) -> Result<Self, VolumeError> {
        let (shape, bytes) = read_pair(raw_path, "F32", 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { shape, data })
    }
}

/// Dense class-index field, same layout as [`Volume`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub shape: [usize; 5],
    pub data: Vec<u16>,
}

impl LabelVolume {
    pub fn new(shape: [usize; 5], data: Vec<u16>) -> Result<Self, ExecError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(ExecError::ShapeMismatch(format!(
                "label shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn save(&self, raw_path: &Path) -> Result<(), VolumeError> {
        let mut bytes = Vec::with_capacity(self.data.len() * 2);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        write_pair(raw_path, &bytes, self.shape, "U16")
    }

    pub fn load(raw_path: &Path) -> Result<Self, VolumeError> {
        let (shape, bytes) = read_pair(raw_path, "U16", 2)?;
        let data = bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        Ok(Self { shape, data })
    }
}

/// U8 codes with the parameters that give them meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: [usize; 5],
    pub codes: Vec<u8>,
    pub params: QuantParams,
}

impl QuantizedTensor {
    pub fn quantize(v: &Volume, params: QuantParams) -> Self {
        Self {
            shape: v.shape,
            codes: params.quantize_slice(&v.data),
            params,
        }
    }

    pub fn dequantize(&self) -> Volume {
        Volume {
            shape: self.shape,
            data: self.codes.iter().map(|&q| self.params.dequantize_f32(q)).collect(),
        }
    }
}

/// Sidecar path for a raw payload: `x.raw` -> `x.json`.
pub fn sidecar_path(raw_path: &Path) -> PathBuf {
    raw_path.with_extension("json")
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_pair(raw_path: &Path, bytes: &[u8], shape: [usize; 5], dtype: &str) -> Result<(), VolumeError> {
    fs::write(raw_path, bytes).map_err(io_err(raw_path))?;
    let side = sidecar_path(raw_path);
    let text = serde_json::to_string(&Sidecar {
        shape,
        dtype: dtype.to_string(),
    })
    .expect("sidecar serializes");
    fs::write(&side, text).map_err(io_err(&side))
}

fn read_pair(raw_path: &Path, dtype: &'static str, elem: usize) -> Result<([usize; 5], Vec<u8>), VolumeError> {
    let side = sidecar_path(raw_path);
    let text = fs::read(&side).map_err(io_err(&side))?;
    let meta: Sidecar = serde_json::from_slice(&text).map_err(|e| VolumeError::BadSidecar {
        path: side.clone(),
        message: e.to_string(),
    })?;
    if meta.dtype != dtype {
        return Err(VolumeError::DtypeMismatch {
            path: side,
            expected: dtype,
            actual: meta.dtype,
        });
    }
    let bytes = fs::read(raw_path).map_err(io_err(raw_path))?;
    let expected = meta
        .shape
        .iter()
        .try_fold(elem, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| VolumeError::BadSidecar {
            path: side.clone(),
            message: "shape overflows".into(),
        })?;
    if bytes.len() != expected {
        return Err(VolumeError::SizeMismatch {
            path: raw_path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok((meta.shape, bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_roundtrip() {
        let dir = std::env::temp_dir().join(format!("voxquant-vol-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let v = Volume::new([1, 1, 2, 2, 2], (0..8).map(|i| i as f32 * 0.5 - 1.0).collect()).unwrap();
        let p = dir.join("v.raw");
        v.save(&p).unwrap();
        assert_eq!(Volume::load(&p).unwrap(), v);
        assert!(matches!(LabelVolume::load(&p), Err(VolumeError::DtypeMismatch { .. })));

        let l = LabelVolume::new([1, 1, 1, 2, 2], vec![0, 3, 133, 7]).unwrap();
        let lp = dir.join("l.raw");
        l.save(&lp).unwrap();
        assert_eq!(LabelVolume::load(&lp).unwrap(), l);

        fs::write(&p, [0u8; 5]).unwrap();
        assert!(matches!(Volume::load(&p), Err(VolumeError::SizeMismatch { .. })));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn shape_checked() {
        assert!(Volume::new([1, 1, 2, 2, 2], vec![0.0; 7]).is_err());
    }
}
