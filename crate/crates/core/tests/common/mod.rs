#![allow(dead_code)]
pub mod exact;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxquant::calib::{calibrate_graph, CalibMethod};
use voxquant::graph::{ConvAttrs, Graph, GraphBuilder};
use voxquant::kernels::Volume;
use voxquant::qdq::{insert_qdq, QdqPolicy};

pub fn attrs(cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> ConvAttrs {
    ConvAttrs {
        kernel: [k; 3],
        stride: [stride; 3],
        padding: [pad; 3],
        in_channels: cin,
        out_channels: cout,
    }
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn random_volume(rng: &mut ChaCha8Rng, shape: [usize; 5], lo: f32, hi: f32) -> Volume {
    Volume::new(shape, uniform(rng, shape.iter().product(), lo, hi)).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Conv(+ReLU) layer with random weights scaled by fan-in.
pub fn conv_layer(b: &mut GraphBuilder, rng: &mut ChaCha8Rng, x: &str, a: ConvAttrs, relu: bool) -> String {
    let n = a.out_channels * a.fan_in();
    let bound = (3.0 / a.fan_in() as f32).sqrt();
    let w = uniform(rng, n, -bound, bound);
    let bias = uniform(rng, a.out_channels, -0.1, 0.1);
    let y = b.conv(x, a, &w, Some(&bias));
    if relu {
        b.relu(&y)
    } else {
        y
    }
}

/// Calibrate on `data` and insert QDQ pairs.
pub fn fake_quantize(g: &Graph, data: &[Volume], policy: &QdqPolicy) -> Graph {
    let table = calibrate_graph(g, data, policy, CalibMethod::MinMax).unwrap();
    insert_qdq(g, &table, policy).unwrap()
}

/// Small random network mixing every integer-capable op: conv with and
/// without ReLU, maxpool, upsample and a two-branch concat.
pub fn random_network(seed: u64) -> (Graph, [usize; 5]) {
    let mut r = rng(seed);
    let cin = r.random_range(1..=3);
    let side = 2 * r.random_range(2..=4);
    let mut b = GraphBuilder::new(format!("rand{seed}"));
    let x = b.input("x", cin, [side; 3]);
    let c1 = r.random_range(1..=4);
    let k = [1, 3][r.random_range(0..2)];
    let relu_a = r.random_bool(0.7);
    let a = conv_layer(&mut b, &mut r, &x, attrs(cin, c1, k, 1, k / 2), relu_a);
    let p = b.maxpool(&a, 2, 2);
    let c2 = r.random_range(1..=4);
    let stride = r.random_range(1..=2);
    let pad = if side / 2 < 3 { 1 } else { r.random_range(0..=1) };
    let relu_b = r.random_bool(0.5);
    let bb = conv_layer(&mut b, &mut r, &p, attrs(c1, c2, 3, stride, pad), relu_b);
    let out = if stride == 1 && pad == 1 {
        let u = b.upsample(&bb, 2);
        b.concat(&[&a, &u], 1)
    } else {
        bb
    };
    b.output(&out);
    (b.finish().unwrap(), [1, cin, side, side, side])
}
