//! Synthetic labelled volumes: nested boxes whose intensities sit at the
//! centre of class-specific bands, plus Gaussian noise.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use voxquant::kernels::{LabelVolume, Volume};

use crate::{io, BenchError};

pub const MIN_SIDE: usize = 16;
pub const DATASET_FILE: &str = "dataset.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub count: usize,
    pub shape: [usize; 3],
    pub classes: usize,
    pub noise: f64,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.classes < 2 || self.classes > u16::MAX as usize {
            return Err(BenchError::InvalidConfig(format!(
                "classes must be in [2, 65535], got {}",
                self.classes
            )));
        }
        if self.shape.iter().any(|&d| d < MIN_SIDE) {
            return Err(BenchError::InvalidConfig(format!(
                "spatial dims must be at least {MIN_SIDE}, got {:?}",
                self.shape
            )));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(BenchError::InvalidConfig(format!(
                "noise must be finite and non-negative, got {}",
                self.noise
            )));
        }
        Ok(())
    }

    /// Width of one intensity band, `1 / C`.
    pub fn band(&self) -> f64 {
        1.0 / self.classes as f64
    }

    pub fn volume_shape(&self) -> [usize; 5] {
        [1, 1, self.shape[0], self.shape[1], self.shape[2]]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub volume: String,
    pub labels: String,
    pub volume_sha256: String,
    pub labels_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub samples: Vec<SampleFiles>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub volumes: Vec<Volume>,
    pub labels: Vec<LabelVolume>,
}

impl Dataset {
    pub fn generate(config: DatasetConfig) -> Result<Self, BenchError> {
        config.validate()?;
        let (volumes, labels) = (0..config.count).map(|i| generate_sample(&config, i)).unzip();
        Ok(Self {
            config,
            volumes,
            labels,
        })
    }

    pub fn load(dir: &Path) -> Result<Self, BenchError> {
        let manifest: DatasetManifest = io::read_json(&dir.join(DATASET_FILE))?;
        manifest.config.validate()?;
        let mut volumes = Vec::with_capacity(manifest.samples.len());
        let mut labels = Vec::with_capacity(manifest.samples.len());
        for s in &manifest.samples {
            let (vp, lp) = (dir.join(&s.volume), dir.join(&s.labels));
            for p in [&vp, &lp] {
                if !p.exists() {
                    return Err(BenchError::MissingArtifact(p.clone()));
                }
            }
            volumes.push(Volume::load(&vp)?);
            labels.push(LabelVolume::load(&lp)?);
        }
        Ok(Self {
            config: manifest.config,
            volumes,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }
}

/// Mean of class `c`'s band, `(c + 1/2)·Δ`.
pub fn class_center(c: usize, classes: usize) -> f64 {
    (c as f64 + 0.5) / classes as f64
}

/// One (volume, labels) pair. Sample `index` draws from its own ChaCha stream,
/// so any subset can be regenerated independently.
///
/// Foreground classes are nested axis-aligned boxes, class `k` inside class
/// `k - 1`, so every boundary separates adjacent bands. Box sizes give each
/// foreground class roughly equal volume.
pub fn generate_sample(cfg: &DatasetConfig, index: usize) -> (Volume, LabelVolume) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let c = cfg.classes;
    // Outer half-extent per axis, keeping a background margin of two voxels.
    let outer: [f64; 3] = std::array::from_fn(|i| (cfg.shape[i] as f64 / 2.0 - 2.0) * rng.random_range(0.9..=1.0));
    let center: [f64; 3] = std::array::from_fn(|i| {
        let slack = cfg.shape[i] as f64 / 2.0 - 2.0 - outer[i];
        cfg.shape[i] as f64 / 2.0 + rng.random_range(-slack..=slack)
    });
    // boxes[k - 1][axis] = (lo, hi), inclusive voxel bounds of class k.
    let mut boxes: Vec<[(i64, i64); 3]> = Vec::with_capacity(c - 1);
    for k in 1..c {
        let s = ((c - k) as f64 / (c - 1) as f64).cbrt();
        let b: [(i64, i64); 3] = std::array::from_fn(|i| {
            let mut lo = (center[i] - s * outer[i]).round() as i64;
            let mut hi = (center[i] + s * outer[i]).round() as i64 - 1;
            if let Some(prev) = boxes.last() {
                lo = lo.max(prev[i].0 + 1);
                hi = hi.min(prev[i].1 - 1);
            }
            (lo, hi)
        });
        if b.iter().any(|&(lo, hi)| lo > hi) {
            break;
        }
        boxes.push(b);
    }
    let noise = (cfg.noise > 0.0).then(|| Normal::new(0.0, cfg.noise).expect("validated sigma"));

    let [d, h, w] = cfg.shape;
    let n = d * h * w;
    let mut values = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as i64, y as i64, x as i64];
                let label = boxes
                    .iter()
                    .take_while(|b| (0..3).all(|i| (b[i].0..=b[i].1).contains(&p[i])))
                    .count();
                let mut v = class_center(label, c);
                if let Some(nd) = &noise {
                    v += nd.sample(&mut rng);
                }
                values.push(v as f32);
                labels.push(label as u16);
            }
        }
    }
    let shape = cfg.volume_shape();
    (
        Volume::new(shape, values).expect("shape matches"),
        LabelVolume::new(shape, labels).expect("shape matches"),
    )
}

/// Writes `vol_NNNN.raw`/`lbl_NNNN.raw` pairs with JSON sidecars and a
/// `dataset.json` manifest into `dir`.
pub fn gen_synthetic_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<DatasetManifest, BenchError> {
    cfg.validate()?;
    io::create_dir(dir)?;
    let mut samples = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let (v, l) = generate_sample(cfg, i);
        let (vn, ln) = (format!("vol_{i:04}.raw"), format!("lbl_{i:04}.raw"));
        v.save(&dir.join(&vn))?;
        l.save(&dir.join(&ln))?;
        samples.push(SampleFiles {
            volume_sha256: io::sha256_hex(&io::read(&dir.join(&vn))?),
            labels_sha256: io::sha256_hex(&io::read(&dir.join(&ln))?),
            volume: vn,
            labels: ln,
        });
    }
    let manifest = DatasetManifest { config: *cfg, samples };
    io::write_json(&dir.join(DATASET_FILE), &manifest)?;
    Ok(manifest)
}

/// Fraction of voxels whose intensity lies outside its label's band.
pub fn band_exit_fraction(ds: &Dataset) -> f64 {
    let delta = ds.config.band();
    let (mut out, mut total) = (0u64, 0u64);
    for (v, l) in ds.volumes.iter().zip(&ds.labels) {
        for (&x, &c) in v.data.iter().zip(&l.data) {
            let lo = c as f64 * delta;
            if !((lo..lo + delta).contains(&(x as f64))) {
                out += 1;
            }
            total += 1;
        }
    }
    out as f64 / total.max(1) as f64
}
