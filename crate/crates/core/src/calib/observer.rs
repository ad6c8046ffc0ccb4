use serde::{Deserialize, Serialize};

use super::{CalibError, QuantParams};

/// Ranges narrower than this after zero-inclusion are treated as constant tensors.
pub const DEGENERATE_SPAN: f64 = 1e-12;
/// Width given to a constant tensor's range so the scale stays positive.
pub const DEGENERATE_WIDEN: f64 = 1e-6;

/// Running min/max over every value seen for one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeObserver {
    pub min_seen: f64,
    pub max_seen: f64,
    pub count: u64,
}

impl Default for RangeObserver {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeObserver {
    /// The empty observer; identity element of [`RangeObserver::merge`].
    pub const fn new() -> Self {
        Self {
            min_seen: f64::INFINITY,
            max_seen: f64::NEG_INFINITY,
            count: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Widen the observed interval to cover `values`. Rejects NaN/Inf without
    /// modifying the observer.
    pub fn observe(&mut self, tensor: &str, values: &[f32]) -> Result<(), CalibError> {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in values {
            if !v.is_finite() {
                return Err(CalibError::NonFiniteValue {
                    tensor: tensor.to_string(),
                });
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !values.is_empty() {
            self.min_seen = self.min_seen.min(lo as f64);
            self.max_seen = self.max_seen.max(hi as f64);
            self.count += values.len() as u64;
        }
        Ok(())
    }

    pub fn merge(&self, other: &RangeObserver) -> RangeObserver {
        RangeObserver {
            min_seen: self.min_seen.min(other.min_seen),
            max_seen: self.max_seen.max(other.max_seen),
            count: self.count + other.count,
        }
    }

    /// Scale and zero point for this range at `bits`.
    pub fn finalize(&self, bits: u8) -> Result<QuantParams, CalibError> {
        if self.is_empty() {
            return Err(CalibError::EmptyObserver);
        }
        params_for_range(self.min_seen, self.max_seen, bits)
    }
}

/// Derive `(s, z)` from a real interval.
///
/// The interval is first widened to contain zero so that zero padding has an
/// exact code. Then `s = (max - min) / (2^k - 1)` and
/// `z = -round_half_even(min / s)`, clamped into the code range.
pub fn params_for_range(min: f64, max: f64, bits: u8) -> Result<QuantParams, CalibError> {
    if !(min.is_finite() && max.is_finite()) || min > max {
        return Err(CalibError::InvalidParams(format!("invalid range [{min}, {max}]")));
    }
    if !(super::MIN_BITS..=super::MAX_BITS).contains(&bits) {
        return Err(CalibError::InvalidParams(format!("unsupported bits {bits}")));
    }
    let lo = min.min(0.0);
    let mut hi = max.max(0.0);
    if hi - lo < DEGENERATE_SPAN {
        hi = lo + DEGENERATE_WIDEN;
    }
    let qmax = ((1u32 << bits) - 1) as f64;
    let scale = (hi - lo) / qmax;
    let zero_point = (-(lo / scale).round_ties_even()).clamp(0.0, qmax) as i32;
    QuantParams::new(scale, zero_point, bits)
}

/// Number of bins used by percentile calibration.
pub const HISTOGRAM_BINS: usize = 2048;

/// Fixed-range histogram used to clip calibration ranges at a percentile.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramObserver {
    lo: f64,
    hi: f64,
    bins: Vec<u64>,
}

impl HistogramObserver {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self {
            lo,
            hi,
            bins: vec![0; HISTOGRAM_BINS],
        }
    }

    pub fn observe(&mut self, values: &[f32]) {
        let span = self.hi - self.lo;
        let n = self.bins.len();
        for &v in values {
            let idx = if span > 0.0 {
                (((v as f64 - self.lo) / span) * n as f64).floor()
            } else {
                0.0
            };
            let idx = idx.clamp(0.0, (n - 1) as f64) as usize;
            self.bins[idx] += 1;
        }
    }

    pub fn merge(&mut self, other: &HistogramObserver) {
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.bins.iter().sum()
    }

    /// Interval keeping the central `percentile`% of the mass: the upper edge
    /// of the bin reaching `percentile`% and the lower edge of the bin reaching
    /// `100 - percentile`%.
    pub fn clipped_range(&self, percentile: f64) -> (f64, f64) {
        let total = self.total();
        if total == 0 {
            return (self.lo, self.hi);
        }
        let width = (self.hi - self.lo) / self.bins.len() as f64;
        let upper_target = (percentile / 100.0 * total as f64).ceil().max(1.0) as u64;
        let lower_target = (((100.0 - percentile) / 100.0) * total as f64).ceil().max(1.0) as u64;

        let mut acc = 0u64;
        let mut lower = self.lo;
        for (i, &c) in self.bins.iter().enumerate() {
            acc += c;
            if acc >= lower_target {
                lower = self.lo + i as f64 * width;
                break;
            }
        }
        acc = 0;
        let mut upper = self.hi;
        for (i, &c) in self.bins.iter().enumerate() {
            acc += c;
            if acc >= upper_target {
                upper = self.lo + (i + 1) as f64 * width;
                break;
            }
        }
        (lower.max(self.lo), upper.min(self.hi).max(lower.max(self.lo)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn obs(min: f64, max: f64, count: u64) -> RangeObserver {
        RangeObserver {
            min_seen: min,
            max_seen: max,
            count,
        }
    }

    #[test]
    fn observe_examples() {
        let mut o = RangeObserver::new();
        o.observe("t", &[3.0, -1.0, 2.0]).unwrap();
        assert_eq!(o, obs(-1.0, 3.0, 3));
        o.observe("t", &[0.0, 5.0]).unwrap();
        assert_eq!((o.min_seen, o.max_seen), (-1.0, 5.0));
        let err = o.observe("act0", &[1.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, CalibError::NonFiniteValue { ref tensor } if tensor == "act0"));
        assert_eq!(o.count, 5);
    }

    #[test]
    fn merge_examples() {
        let m = obs(-1.0, 3.0, 10).merge(&obs(0.0, 5.0, 4));
        assert_eq!(m, obs(-1.0, 5.0, 14));
        let x = obs(-2.5, 7.0, 3);
        assert_eq!(x.merge(&RangeObserver::new()), x);
        assert_eq!(RangeObserver::new().merge(&x), x);
    }

    #[test]
    fn finalize_examples() {
        let p = obs(0.0, 255.0, 1).finalize(8).unwrap();
        assert_eq!((p.scale, p.zero_point), (1.0, 0));

        let p = obs(-1.0, 2.0, 1).finalize(8).unwrap();
        assert!((p.scale - 3.0 / 255.0).abs() < 1e-18);
        assert!((p.scale - 0.0117647).abs() < 1e-7);
        assert_eq!(p.zero_point, 85);

        let p = obs(5.0, 5.0, 1).finalize(8).unwrap();
        assert_eq!(p.scale, 5.0 / 255.0);
        assert_eq!(p.zero_point, 0);

        assert!(matches!(
            RangeObserver::new().finalize(8),
            Err(CalibError::EmptyObserver)
        ));
    }

    #[test]
    fn degenerate_zero_range_gets_positive_scale() {
        let p = obs(0.0, 0.0, 4).finalize(8).unwrap();
        assert_eq!(p.scale, DEGENERATE_WIDEN / 255.0);
        assert_eq!(p.zero_point, 0);
        let p = obs(-1e-13, -1e-13, 1).finalize(8).unwrap();
        assert!(p.scale > 0.0);
    }

    #[test]
    fn histogram_clips_outliers() {
        let mut values: Vec<f32> = (0..10_000).map(|i| (i % 100) as f32 / 100.0).collect();
        values.push(50.0);
        let mut o = RangeObserver::new();
        o.observe("t", &values).unwrap();
        let mut h = HistogramObserver::new(o.min_seen, o.max_seen);
        h.observe(&values);
        let (lo, hi) = h.clipped_range(99.9);
        assert_eq!(lo, 0.0);
        assert!(hi < 1.1, "upper clip {hi}");
        let (_, hi) = h.clipped_range(100.0);
        assert_eq!(hi, 50.0);
    }

    fn arb_observer() -> impl Strategy<Value = RangeObserver> {
        (-1e3f64..1e3, 0f64..1e3, 1u64..1000).prop_map(|(lo, w, c)| obs(lo, lo + w, c))
    }

    proptest! {
        #[test]
        fn merge_is_associative_and_commutative(a in arb_observer(), b in arb_observer(), c in arb_observer()) {
            prop_assert_eq!(a.merge(&b).merge(&c), a.merge(&b.merge(&c)));
            prop_assert_eq!(a.merge(&b), b.merge(&a));
        }

        #[test]
        fn observing_never_shrinks(a in arb_observer(), vals in proptest::collection::vec(-1e4f32..1e4, 0..50)) {
            let mut o = a;
            o.observe("t", &vals).unwrap();
            prop_assert!(o.min_seen <= a.min_seen && o.max_seen >= a.max_seen);
            prop_assert!(o.min_seen <= o.max_seen);
        }

        #[test]
        fn finalize_keeps_zero_point_in_range(lo in -1e6f64..1e6, w in 0f64..1e6, bits in 2u8..=8) {
            let p = obs(lo, lo + w, 1).finalize(bits).unwrap();
            prop_assert!(p.scale > 0.0);
            prop_assert!(p.zero_point >= 0 && p.zero_point <= p.qmax());
        }
    }
}
