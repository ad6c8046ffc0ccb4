//! Affine quantization parameters and the scalar quantize/dequantize maps.

use serde::{Deserialize, Serialize};

use super::CalibError;

/// Lowest bit-width accepted for fake quantization.
pub const MIN_BITS: u8 = 2;
/// Highest bit-width; also the only width the integer engine executes.
pub const MAX_BITS: u8 = 8;

/// Per-tensor affine quantization parameters `(scale, zero_point, bits)`.
///
/// A real value `x` maps to the code `clamp(round(x / scale) + zero_point, 0, 2^bits - 1)`
/// and a code `q` maps back to `(q - zero_point) * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
    pub bits: u8,
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: i32, bits: u8) -> Result<Self, CalibError> {
        let p = Self {
            scale,
            zero_point,
            bits,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), CalibError> {
        if !(MIN_BITS..=MAX_BITS).contains(&self.bits) {
            return Err(CalibError::InvalidParams(format!(
                "bits {} outside [{MIN_BITS}, {MAX_BITS}]",
                self.bits
            )));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(CalibError::InvalidParams(format!(
                "scale {} must be finite and positive",
                self.scale
            )));
        }
        if self.zero_point < 0 || self.zero_point > self.qmax() {
            return Err(CalibError::InvalidParams(format!(
                "zero point {} outside [0, {}]",
                self.zero_point,
                self.qmax()
            )));
        }
        Ok(())
    }

    /// Largest code, `2^bits - 1`.
    pub fn qmax(&self) -> i32 {
        (1i32 << self.bits) - 1
    }

    /// Exact bitwise identity, used when deciding whether two QDQ pairs cancel.
    pub fn same_as(&self, other: &QuantParams) -> bool {
        self.scale.to_bits() == other.scale.to_bits() && self.zero_point == other.zero_point && self.bits == other.bits
    }

    /// Quantize an `f32` tensor element to its code. Same map as [`quantize_scalar`].
    #[inline]
    pub fn quantize_f32(&self, x: f32) -> u8 {
        quantize_scalar(x as f64, self) as u8
    }

    /// [`QuantParams::quantize_f32`] over a slice, written so the division
    /// vectorizes. Clamping to `[-z, qmax - z]` before rounding keeps the
    /// value small enough for the add-and-subtract `1.5 * 2^52` trick, which
    /// rounds half to even in the default FP mode; `max` maps NaN to code 0.
    pub fn quantize_into(&self, xs: &[f32], out: &mut [u8]) {
        const ROUND: f64 = 6_755_399_441_055_744.0;
        assert_eq!(xs.len(), out.len());
        let z = self.zero_point as f64;
        let (lo, hi, s) = (-z, self.qmax() as f64 - z, self.scale);
        let mut t = [0f64; 16];
        for (o, x) in out.chunks_mut(16).zip(xs.chunks(16)) {
            for (t, &x) in t.iter_mut().zip(x) {
                *t = ((x as f64 / s).max(lo).min(hi) + ROUND) - ROUND + z;
            }
            for (o, t) in o.iter_mut().zip(&t) {
                *o = *t as u8;
            }
        }
    }

    pub fn quantize_slice(&self, xs: &[f32]) -> Vec<u8> {
        let mut out = vec![0; xs.len()];
        self.quantize_into(xs, &mut out);
        out
    }

    /// [`QuantParams::dequantize_f32`] over a slice, through a table of all codes.
    pub fn dequantize_into(&self, qs: &[u8], out: &mut [f32]) {
        assert_eq!(qs.len(), out.len());
        let mut lut = [0f32; 256];
        for (q, v) in lut.iter_mut().enumerate().take(self.qmax() as usize + 1) {
            *v = self.dequantize_f32(q as u8);
        }
        for (o, &q) in out.iter_mut().zip(qs) {
            *o = lut[q as usize];
        }
    }

    pub fn dequantize_slice(&self, qs: &[u8]) -> Vec<f32> {
        let mut out = vec![0.0; qs.len()];
        self.dequantize_into(qs, &mut out);
        out
    }

    /// Dequantize a code to the `f32` value carried by tensors.
    #[inline]
    pub fn dequantize_f32(&self, q: u8) -> f32 {
        ((q as i32 - self.zero_point) as f64 * self.scale) as f32
    }

    /// The real interval `[lo, hi]` representable by the codes.
    pub fn representable_range(&self) -> (f64, f64) {
        (
            (0 - self.zero_point) as f64 * self.scale,
            (self.qmax() - self.zero_point) as f64 * self.scale,
        )
    }
}

/// `clamp(round_half_even(x / s) + z, 0, 2^k - 1)`.
///
/// Total: non-finite inputs saturate (NaN maps to 0).
#[inline]
pub fn quantize_scalar(x: f64, p: &QuantParams) -> i32 {
    let v = (x / p.scale).round_ties_even() + p.zero_point as f64;
    if v.is_nan() {
        return 0;
    }
    v.clamp(0.0, p.qmax() as f64) as i32
}

/// `(q - z) * s`.
pub fn dequantize_scalar(q: i32, p: &QuantParams) -> Result<f64, CalibError> {
    if q < 0 || q > p.qmax() {
        return Err(CalibError::QuantizedValueOutOfRange {
            value: q as i64,
            qmax: p.qmax(),
        });
    }
    Ok((q - p.zero_point) as f64 * p.scale)
}
