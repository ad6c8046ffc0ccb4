mod common;

use common::exact::{exact_params, exact_quantize, rat, rel_diff};
use common::rng;
use num_rational::BigRational;
use num_traits::Signed;
use proptest::prelude::*;
use rand::Rng;
use voxquant::calib::{calibrate_graph, dequantize_scalar, params_for_range, quantize_scalar, CalibMethod};
use voxquant::graph::GraphBuilder;
use voxquant::kernels::Volume;
use voxquant::qdq::QdqPolicy;

/// Log-uniform magnitude with random sign, so both tiny and large ranges appear.
fn random_endpoint(r: &mut impl Rng) -> f64 {
    let mag = 10f64.powf(r.random_range(-4.0..3.0));
    if r.random_bool(0.5) {
        mag
    } else {
        -mag
    }
}

fn check_against_exact(min: f64, max: f64, bits: u8, x: f64) {
    let p = params_for_range(min, max, bits).unwrap();
    let (s, z) = exact_params(min, max, bits);
    assert!(
        rel_diff(p.scale, &s) <= 1e-12,
        "scale {} vs {s} for [{min}, {max}] k={bits}",
        p.scale
    );
    assert_eq!(p.zero_point as i64, z, "zero point for [{min}, {max}] k={bits}");
    let q = quantize_scalar(x, &p);
    assert_eq!(
        q as i64,
        exact_quantize(x, &s, z, bits),
        "code for x={x} in [{min}, {max}] k={bits}"
    );
}

#[test]
fn ten_thousand_random_triples_match_exact_evaluation() {
    let mut r = rng(1);
    for _ in 0..10_000 {
        let (a, b) = (random_endpoint(&mut r), random_endpoint(&mut r));
        let (min, max) = if a <= b { (a, b) } else { (b, a) };
        let bits = r.random_range(2..=8u8);
        let (lo, hi) = (min.min(0.0), max.max(0.0));
        let span = hi - lo;
        // A quarter of the samples fall outside the range to exercise clamping.
        let x = r.random_range(lo - span / 4.0..hi + span / 4.0);
        check_against_exact(min, max, bits, x);
    }
}

#[test]
fn exact_ties_round_to_even() {
    // s = 2^-j makes x/s exactly representable, so x = (n + 1/2)·s is a true tie.
    for bits in 2..=8u8 {
        let qmax = (1u32 << bits) - 1;
        for j in 0..6 {
            let s = (2f64).powi(-j);
            let max = qmax as f64 * s;
            let p = params_for_range(0.0, max, bits).unwrap();
            assert_eq!(p.scale, s);
            for n in 0..qmax {
                let x = (n as f64 + 0.5) * s;
                let expect = if n % 2 == 0 { n } else { n + 1 };
                assert_eq!(quantize_scalar(x, &p), expect as i32, "k={bits} s={s} n={n}");
                check_against_exact(0.0, max, bits, x);
            }
        }
    }
}

#[test]
fn documented_example_values() {
    let p = params_for_range(-1.0, 2.0, 8).unwrap();
    assert_eq!(p.zero_point, 85);
    assert!(rel_diff(p.scale, &(rat(3.0) / rat(255.0))) <= 1e-15);
    // 0.5 / (3/255) = 42.5 exactly, which rounds to 42.
    assert_eq!(quantize_scalar(0.5, &p), 127);
    assert!((dequantize_scalar(127, &p).unwrap() - 0.494_117_647).abs() < 1e-8);
}

proptest! {
    #[test]
    fn round_trip_error_at_most_half_step(a in -100.0f64..100.0, b in -100.0f64..100.0,
                                          bits in 2u8..=8, t in 0.0f64..=1.0) {
        let (min, max) = if a <= b { (a, b) } else { (b, a) };
        let p = params_for_range(min, max, bits).unwrap();
        let (lo, hi) = (min.min(0.0), max.max(0.0));
        let x = lo + t * (hi - lo);
        let back = dequantize_scalar(quantize_scalar(x, &p), &p).unwrap();
        let err = (rat(back) - rat(x)).abs();
        let half = rat(p.scale) / rat(2.0);
        // Slack for the rounding of s itself and the f64 product (q - z)·s.
        prop_assert!(err <= half.clone() + half * rat(1e-12), "x={x} back={back} s={}", p.scale);
    }

    #[test]
    fn quantize_is_monotone(a in -50.0f64..50.0, b in -50.0f64..50.0, bits in 2u8..=8,
                            x in -80.0f64..80.0, y in -80.0f64..80.0) {
        let (min, max) = if a <= b { (a, b) } else { (b, a) };
        let p = params_for_range(min, max, bits).unwrap();
        let (x, y) = if x <= y { (x, y) } else { (y, x) };
        prop_assert!(quantize_scalar(x, &p) <= quantize_scalar(y, &p));
    }

    #[test]
    fn zero_is_exactly_representable(a in -1e3f64..1e3, b in -1e3f64..1e3, bits in 2u8..=8) {
        let (min, max) = if a <= b { (a, b) } else { (b, a) };
        let p = params_for_range(min, max, bits).unwrap();
        let q0 = quantize_scalar(0.0, &p);
        prop_assert_eq!(q0, p.zero_point);
        prop_assert_eq!(dequantize_scalar(q0, &p).unwrap(), 0.0);
    }
}

#[test]
fn calibration_is_independent_of_sample_order() {
    let mut b = GraphBuilder::new("order");
    let x = b.input("x", 1, [4, 4, 4]);
    let mut r = rng(9);
    let y = common::conv_layer(&mut b, &mut r, &x, common::attrs(1, 2, 3, 1, 1), true);
    b.output(&y);
    let g = b.finish().unwrap();
    let data: Vec<Volume> = (0..5)
        .map(|i| common::random_volume(&mut r, [1, 1, 4, 4, 4], -1.0 - i as f32, 1.0))
        .collect();
    let mut rev = data.clone();
    rev.reverse();
    let policy = QdqPolicy::default();
    let fwd = calibrate_graph(&g, &data, &policy, CalibMethod::MinMax).unwrap();
    let bwd = calibrate_graph(&g, &rev, &policy, CalibMethod::MinMax).unwrap();
    assert_eq!(fwd.to_json(), bwd.to_json());
}

#[test]
fn degenerate_range_is_widened() {
    let p = params_for_range(0.0, 0.0, 8).unwrap();
    let (s, z) = exact_params(0.0, 0.0, 8);
    assert!(rel_diff(p.scale, &s) <= 1e-12);
    assert_eq!(z, 0);
    assert!(s > BigRational::from_float(0.0).unwrap());
}
