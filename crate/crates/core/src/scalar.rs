//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssignOps, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point scalar used for probabilities, counts and scores.
///
/// Implemented for `f32` and `f64`. Everything that crosses a file boundary
/// is serialized through serde, so the scalar must be too.
pub trait Real:
    Float
    + FloatConst
    + NumAssignOps
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Panics only for values the scalar cannot
    /// represent at all, which never happens for `f32`/`f64`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Tolerance suitable for "sums to one" style checks at this precision.
    fn norm_tolerance() -> Self;
}

impl Real for f32 {
    fn norm_tolerance() -> Self {
        1e-5
    }
}

impl Real for f64 {
    fn norm_tolerance() -> Self {
        1e-9
    }
}

/// `ceil(fraction * n)` with a small guard against representation error, so
/// that `0.3 * 10` yields 3 rather than 4.
pub fn ceil_fraction(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    let rounded = raw.round();
    if (raw - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        raw.ceil() as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_fraction_absorbs_float_noise() {
        assert_eq!(ceil_fraction(0.3, 10), 3);
        assert_eq!(ceil_fraction(0.9, 10), 9);
        assert_eq!(ceil_fraction(0.9, 2), 2);
        assert_eq!(ceil_fraction(0.3, 1), 1);
        assert_eq!(ceil_fraction(0.3, 7), 3);
        assert_eq!(ceil_fraction(1.0, 7), 7);
    }

    #[test]
    fn lit_round_trips() {
        assert_eq!(<f64 as Real>::lit(0.25), 0.25);
        assert_eq!(<f32 as Real>::lit(0.25), 0.25f32);
    }
}
