//! Model zoo: the analytic centroid-net, the seeded toy U-Net family, and the
//! random small networks used as engine-semantics fixtures.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use voxquant::graph::{ConvAttrs, Graph, GraphBuilder, OpKind};
use voxquant::kernels::Volume;
use voxquant::qdq::{QdqPolicy, QUANTIZABLE_KINDS};

use crate::data::class_center;
use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFamily {
    CentroidNet,
    ToyUnet,
}

impl FromStr for ModelFamily {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "centroid-net" => Ok(Self::CentroidNet),
            "toy-unet" => Ok(Self::ToyUnet),
            _ => Err(format!(
                "unknown model family `{s}` (expected centroid-net or toy-unet)"
            )),
        }
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::CentroidNet => "centroid-net",
            Self::ToyUnet => "toy-unet",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scale {
    S,
    M,
    L,
}

impl Scale {
    /// Base channel width of the toy U-Net; parameters grow with its square.
    pub fn base_width(self) -> usize {
        match self {
            Scale::S => 4,
            Scale::M => 14,
            Scale::L => 40,
        }
    }
}

impl FromStr for Scale {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "S" | "s" => Ok(Self::S),
            "M" | "m" => Ok(Self::M),
            "L" | "l" => Ok(Self::L),
            _ => Err(format!("unknown scale `{s}` (expected S, M or L)")),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: ModelFamily,
    pub scale: Scale,
    pub classes: usize,
    pub spatial: [usize; 3],
    pub seed: u64,
}

impl ModelConfig {
    pub fn name(&self) -> String {
        match self.family {
            ModelFamily::CentroidNet => format!("centroid-net-c{}", self.classes),
            ModelFamily::ToyUnet => format!("toy-unet-{}", self.scale),
        }
    }
}

pub fn gen_model(cfg: &ModelConfig) -> Result<Graph, BenchError> {
    if cfg.classes < 2 {
        return Err(BenchError::InvalidConfig(format!(
            "classes must be at least 2, got {}",
            cfg.classes
        )));
    }
    if cfg.spatial.contains(&0) {
        return Err(BenchError::InvalidConfig(format!(
            "empty spatial shape {:?}",
            cfg.spatial
        )));
    }
    match cfg.family {
        ModelFamily::CentroidNet => Ok(centroid_net(cfg)),
        ModelFamily::ToyUnet => toy_unet(cfg),
    }
}

pub fn conv_attrs(cin: usize, cout: usize, k: usize) -> ConvAttrs {
    ConvAttrs {
        kernel: [k; 3],
        stride: [1; 3],
        padding: [k / 2; 3],
        in_channels: cin,
        out_channels: cout,
    }
}

/// 3³ box smoothing, then nearest-centroid scoring `x·μ_c − μ_c²/2`, then ArgMax.
fn centroid_net(cfg: &ModelConfig) -> Graph {
    let c = cfg.classes;
    let mut b = GraphBuilder::new(cfg.name());
    let x = b.input("x", 1, cfg.spatial);
    let smooth = b.conv(&x, conv_attrs(1, 1, 3), &[1.0 / 27.0; 27], None);
    let mu: Vec<f32> = (0..c).map(|k| class_center(k, c) as f32).collect();
    let bias: Vec<f32> = mu.iter().map(|m| -m * m / 2.0).collect();
    let scores = b.conv(&smooth, conv_attrs(1, c, 1), &mu, Some(&bias));
    let out = b.node(voxquant::graph::Op::ArgMax { axis: 1 }, &[&scores]);
    b.output(&out);
    b.finish().expect("centroid-net is well formed")
}

/// Conv with He-uniform weights and small random biases.
fn random_conv(b: &mut GraphBuilder, rng: &mut ChaCha8Rng, x: &str, a: ConvAttrs, relu: bool) -> String {
    let fan_in = a.fan_in();
    let bound = (6.0 / fan_in as f32).sqrt();
    let w: Vec<f32> = (0..a.out_channels * fan_in)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    let bias: Vec<f32> = (0..a.out_channels).map(|_| rng.random_range(-0.05..0.05)).collect();
    let y = b.conv(x, a, &w, Some(&bias));
    if relu {
        b.relu(&y)
    } else {
        y
    }
}

/// Three-level encoder/decoder with skip connections. Widths double per level
/// from `w` to `8w` at the bottleneck; the two full- and half-resolution
/// decoder convs are 1×1 so that most parameters and work sit at low resolution.
fn toy_unet(cfg: &ModelConfig) -> Result<Graph, BenchError> {
    if cfg.spatial.iter().any(|d| d % 8 != 0) {
        return Err(BenchError::InvalidConfig(format!(
            "toy-unet needs spatial dims divisible by 8, got {:?}",
            cfg.spatial
        )));
    }
    let w = cfg.scale.base_width();
    let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut b = GraphBuilder::new(cfg.name());
    let x = b.input("x", 1, cfg.spatial);
    let e0 = random_conv(&mut b, &mut r, &x, conv_attrs(1, w, 3), true);
    let p0 = b.maxpool(&e0, 2, 2);
    let e1 = random_conv(&mut b, &mut r, &p0, conv_attrs(w, 2 * w, 3), true);
    let p1 = b.maxpool(&e1, 2, 2);
    let e2 = random_conv(&mut b, &mut r, &p1, conv_attrs(2 * w, 4 * w, 3), true);
    let p2 = b.maxpool(&e2, 2, 2);
    let b0 = random_conv(&mut b, &mut r, &p2, conv_attrs(4 * w, 8 * w, 3), true);
    let b1 = random_conv(&mut b, &mut r, &b0, conv_attrs(8 * w, 8 * w, 3), true);
    let u2 = b.upsample(&b1, 2);
    let c2 = b.concat(&[&u2, &e2], 1);
    let d2 = random_conv(&mut b, &mut r, &c2, conv_attrs(12 * w, 4 * w, 3), true);
    let u1 = b.upsample(&d2, 2);
    let c1 = b.concat(&[&u1, &e1], 1);
    let d1 = random_conv(&mut b, &mut r, &c1, conv_attrs(6 * w, 2 * w, 1), true);
    let u0 = b.upsample(&d1, 2);
    let c0 = b.concat(&[&u0, &e0], 1);
    let d0 = random_conv(&mut b, &mut r, &c0, conv_attrs(3 * w, w, 1), true);
    let logits = random_conv(&mut b, &mut r, &d0, conv_attrs(w, cfg.classes, 1), false);
    let out = b.node(voxquant::graph::Op::ArgMax { axis: 1 }, &[&logits]);
    b.output(&out);
    Ok(b.finish()?)
}

/// A random network plus calibration and evaluation inputs, for checking the
/// integer engine against its oracle and against fake quantization.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub graph: Graph,
    pub policy: QdqPolicy,
    pub calib: Vec<Volume>,
    pub input: Volume,
}

fn random_volume(r: &mut ChaCha8Rng, shape: [usize; 5], lo: f32, hi: f32) -> Volume {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| r.random_range(lo..hi))
        .collect();
    Volume::new(shape, data).expect("shape matches")
}

/// Random conv geometries (per-axis kernel, stride and padding), fused and
/// unfused ReLUs, pooling, upsampling and a two-branch concat that usually
/// needs a requantize. The policy always covers Conv3D and a random subset of
/// the other integer-capable kinds.
pub fn random_fixture(seed: u64) -> Fixture {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let cin = r.random_range(1..=3);
    let spatial: [usize; 3] = std::array::from_fn(|_| 2 * r.random_range(3..=5));
    let mut b = GraphBuilder::new(format!("fixture-{seed}"));
    let x = b.input("x", cin, spatial);

    let c1 = r.random_range(1..=6);
    let k1: [usize; 3] = std::array::from_fn(|_| [1, 3][r.random_range(0..2)]);
    let a1 = ConvAttrs {
        kernel: k1,
        stride: [1; 3],
        padding: k1.map(|k| k / 2),
        in_channels: cin,
        out_channels: c1,
    };
    let relu = r.random_bool(0.7);
    let mut a = random_conv(&mut b, &mut r, &x, a1, relu);
    if r.random_bool(0.4) {
        let relu = r.random_bool(0.5);
        a = random_conv(&mut b, &mut r, &a, conv_attrs(c1, c1, 3), relu);
    }
    let p = b.maxpool(&a, 2, 2);
    let pooled = spatial.map(|d| d / 2);

    let c2 = r.random_range(1..=6);
    let same = r.random_bool(0.5);
    let mut a2 = conv_attrs(c1, c2, 3);
    if !same {
        #[allow(clippy::needless_range_loop)]
        for i in 0..3 {
            a2.kernel[i] = r.random_range(1..=3);
            a2.stride[i] = r.random_range(1..=2);
            a2.padding[i] = r.random_range(0..=1);
            if pooled[i] + 2 * a2.padding[i] < a2.kernel[i] {
                a2.padding[i] = 1;
            }
        }
    }
    let relu = r.random_bool(0.5);
    let bb = random_conv(&mut b, &mut r, &p, a2, relu);
    let out_dims: [usize; 3] =
        std::array::from_fn(|i| (pooled[i] + 2 * a2.padding[i] - a2.kernel[i]) / a2.stride[i] + 1);
    let out = if out_dims == pooled {
        let u = b.upsample(&bb, 2);
        let cat = b.concat(&[&a, &u], 1);
        let (relu, cout) = (r.random_bool(0.5), r.random_range(1..=3));
        random_conv(&mut b, &mut r, &cat, conv_attrs(c1 + c2, cout, 1), relu)
    } else {
        bb
    };
    b.output(&out);
    let graph = b.finish().expect("fixture geometry is valid");

    let mut policy = QdqPolicy::default();
    for kind in QUANTIZABLE_KINDS.into_iter().filter(|&k| k != OpKind::Conv3D) {
        if r.random_bool(0.6) {
            policy.quantize_kinds.insert(kind);
        }
    }
    let shape = [1, cin, spatial[0], spatial[1], spatial[2]];
    let calib = (0..2).map(|_| random_volume(&mut r, shape, -1.0, 1.0)).collect();
    // Slightly outside the calibrated range, so the clamps are exercised.
    let input = random_volume(&mut r, shape, -1.2, 1.2);
    Fixture {
        graph,
        policy,
        calib,
        input,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(family: ModelFamily, scale: Scale, seed: u64) -> ModelConfig {
        ModelConfig {
            family,
            scale,
            classes: 4,
            spatial: [16; 3],
            seed,
        }
    }

    #[test]
    fn parameter_counts_scale_by_about_100() {
        let s = gen_model(&cfg(ModelFamily::ToyUnet, Scale::S, 1))
            .unwrap()
            .param_count();
        let m = gen_model(&cfg(ModelFamily::ToyUnet, Scale::M, 1))
            .unwrap()
            .param_count();
        let l = gen_model(&cfg(ModelFamily::ToyUnet, Scale::L, 1))
            .unwrap()
            .param_count();
        assert!((50_000..200_000).contains(&s), "{s}");
        assert!((500_000..2_000_000).contains(&m), "{m}");
        let ratio = l as f64 / s as f64;
        assert!((80.0..125.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn same_seed_same_weights() {
        let a = gen_model(&cfg(ModelFamily::ToyUnet, Scale::S, 7)).unwrap();
        let b = gen_model(&cfg(ModelFamily::ToyUnet, Scale::S, 7)).unwrap();
        let c = gen_model(&cfg(ModelFamily::ToyUnet, Scale::S, 8)).unwrap();
        assert_eq!(a.blob, b.blob);
        assert_ne!(a.blob, c.blob);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = cfg(ModelFamily::ToyUnet, Scale::S, 1);
        c.spatial = [12, 16, 16];
        assert!(matches!(gen_model(&c), Err(BenchError::InvalidConfig(_))));
        c.classes = 1;
        assert!(matches!(gen_model(&c), Err(BenchError::InvalidConfig(_))));
        assert!("Conv2D".parse::<ModelFamily>().is_err());
        assert!("XL".parse::<Scale>().is_err());
    }

    #[test]
    fn fixtures_are_valid_and_varied() {
        let mut concat = 0;
        for seed in 0..50 {
            let f = random_fixture(seed);
            voxquant::graph::validate_and_infer_shapes(&f.graph, 1).unwrap();
            concat += f.graph.count_kind(OpKind::Concat);
        }
        assert!(concat > 10, "{concat}");
    }
}
