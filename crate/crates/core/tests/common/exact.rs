//! Exact rational evaluation of the affine quantization formulas, used as an
//! oracle for the f64 implementation.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

pub fn rat(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite")
}

pub fn round_half_even(r: &BigRational) -> BigInt {
    let fl = r.floor();
    let frac = r - &fl;
    let half = BigRational::new(BigInt::one(), BigInt::from(2));
    let base = fl.to_integer();
    let odd = !(&base % BigInt::from(2)).is_zero();
    if frac > half || (frac == half && odd) {
        base + 1
    } else {
        base
    }
}

fn clamp(v: BigInt, hi: i64) -> i64 {
    v.to_i64()
        .map_or(if v.is_negative() { 0 } else { hi }, |v| v.clamp(0, hi))
}

/// Exact `(scale, zero_point)` for an observed range, including the
/// zero-inclusion and degenerate-range rules.
pub fn exact_params(min: f64, max: f64, bits: u8) -> (BigRational, i64) {
    let qmax = (1i64 << bits) - 1;
    let lo = min.min(0.0);
    let mut hi = max.max(0.0);
    if hi - lo < 1e-12 {
        hi = lo + 1e-6;
    }
    let s = (rat(hi) - rat(lo)) / BigRational::from_integer(BigInt::from(qmax));
    let z = clamp(-round_half_even(&(rat(lo) / &s)), qmax);
    (s, z)
}

/// `clamp(round_half_even(x / s) + z, 0, qmax)` in exact arithmetic.
pub fn exact_quantize(x: f64, s: &BigRational, z: i64, bits: u8) -> i64 {
    let qmax = (1i64 << bits) - 1;
    clamp(round_half_even(&(rat(x) / s)) + z, qmax)
}

pub fn rel_diff(approx: f64, exact: &BigRational) -> f64 {
    let d = (rat(approx) - exact).abs() / exact.abs();
    d.to_f64().unwrap_or(f64::INFINITY)
}
