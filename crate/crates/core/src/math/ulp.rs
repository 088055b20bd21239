//! IEEE-754 spacing helpers for the two supported storage formats.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage format of matrices and parameters.
///
/// `Binary32` is used for training and bundle measurement; `Binary64` only by
/// the verification oracles (finite-difference checks and the like).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FloatFormat {
    #[default]
    Binary32,
    Binary64,
}

impl FloatFormat {
    /// Bytes per stored element.
    pub fn width(self) -> usize {
        match self {
            FloatFormat::Binary32 => 4,
            FloatFormat::Binary64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FloatFormat::Binary32 => "binary32",
            FloatFormat::Binary64 => "binary64",
        }
    }
}

/// Distance from `value` to the next representable number above it in
/// `format`. For `0.0` this is the smallest positive subnormal.
///
/// `value` is first rounded into `format`; the spacing returned is that of the
/// rounded value. At the largest finite value the spacing below is returned.
pub fn ulp(value: f64, format: FloatFormat) -> Result<f64> {
    if !value.is_finite() || value < 0.0 {
        return Err(Error::Domain(format!(
            "ulp requires a finite non-negative value, got {value}"
        )));
    }
    match format {
        FloatFormat::Binary32 => {
            let v = value as f32;
            if !v.is_finite() {
                return Err(Error::Domain(format!("{value} is outside the binary32 range")));
            }
            let next = f32::from_bits(v.to_bits() + 1);
            if next.is_finite() {
                Ok(f64::from(next) - f64::from(v))
            } else {
                let prev = f32::from_bits(v.to_bits() - 1);
                Ok(f64::from(v) - f64::from(prev))
            }
        }
        FloatFormat::Binary64 => {
            let next = f64::from_bits(value.to_bits() + 1);
            if next.is_finite() {
                Ok(next - value)
            } else {
                Ok(value - f64::from_bits(value.to_bits() - 1))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn spacing_at_one() {
        assert_eq!(ulp(1.0, FloatFormat::Binary32).unwrap(), 2f64.powi(-23));
        assert_eq!(ulp(1.0, FloatFormat::Binary64).unwrap(), 2f64.powi(-52));
    }

    #[test]
    fn spacing_at_zero_is_smallest_subnormal() {
        assert_eq!(ulp(0.0, FloatFormat::Binary32).unwrap(), 2f64.powi(-149));
        assert_eq!(ulp(0.0, FloatFormat::Binary64).unwrap(), f64::from_bits(1));
    }

    #[test]
    fn rejects_bad_inputs() {
        for v in [-1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(ulp(v, FloatFormat::Binary32), Err(Error::Domain(_))));
        }
        assert!(ulp(1e300, FloatFormat::Binary32).is_err());
    }

    #[test]
    fn largest_finite_values() {
        assert_eq!(ulp(f64::from(f32::MAX), FloatFormat::Binary32).unwrap(), 2f64.powi(104));
        assert_eq!(ulp(f64::MAX, FloatFormat::Binary64).unwrap(), 2f64.powi(971));
    }

    proptest! {
        #[test]
        fn increment_is_visible_and_quarter_is_not(v in 1e-30f32..1e30f32) {
            let u = ulp(f64::from(v), FloatFormat::Binary32).unwrap() as f32;
            prop_assert!(v + u > v);
            prop_assert_eq!(v + u / 4.0, v);
        }

        #[test]
        fn monotone_in_magnitude(a in 0.0f64..1e12, b in 0.0f64..1e12) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            for f in [FloatFormat::Binary32, FloatFormat::Binary64] {
                prop_assert!(ulp(lo, f).unwrap() <= ulp(hi, f).unwrap());
            }
        }
    }
}
