//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point type the geometry, detector and mining code is generic over.
///
/// Implemented for `f32` and `f64`. Everything persisted to disk goes through
/// serde, so the scalar must round-trip through JSON.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Converts an `f64` literal or measurement into this scalar.
    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            #[inline]
            fn lit(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

/// Logistic sigmoid, numerically stable for large |x|.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Wraps an angle into `[-pi, pi)`.
#[inline]
pub fn normalize_angle<T: Real>(a: T) -> T {
    let two_pi = T::PI() + T::PI();
    let mut r = (a + T::PI()) % two_pi;
    if r < T::zero() {
        r += two_pi;
    }
    let out = r - T::PI();
    // `%` can land exactly on +pi after rounding.
    if out >= T::PI() {
        out - two_pi
    } else {
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_stays_in_half_open_range() {
        for k in -50..50 {
            let a = k as f64 * 0.37;
            let n = normalize_angle(a);
            assert!((-std::f64::consts::PI..std::f64::consts::PI).contains(&n), "{a} -> {n}");
            assert!(
                ((a - n) / std::f64::consts::TAU).fract().abs() < 1e-9
                    || ((a - n) / std::f64::consts::TAU).fract().abs() > 1.0 - 1e-9
            );
        }
        assert_eq!(normalize_angle(std::f64::consts::PI), -std::f64::consts::PI);
        assert_eq!(normalize_angle(-std::f64::consts::PI), -std::f64::consts::PI);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert_eq!(sigmoid(800.0f64), 1.0);
        assert!((sigmoid(-10.0f32) - 4.539_787e-5).abs() < 1e-9);
    }
}
