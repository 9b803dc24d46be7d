//! Scalar abstraction for the cost model and statistics.
//!
//! Timing constants and iteration costs are computed in a generic floating
//! point type so the same model can be evaluated in `f32` or `f64`. The event
//! loop itself runs on integer microseconds and only converts at the boundary.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point scalar usable by the cost model: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Lossy conversion from a count or constant.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("scalar conversion from f64")
    }

    fn count(n: u64) -> Self {
        Self::from_u64(n).expect("scalar conversion from u64")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts a duration in milliseconds to whole microseconds, rounding to
/// nearest. Non-finite or negative inputs map to zero.
pub fn ms_to_micros<S: Scalar>(ms: S) -> u64 {
    let us = ms.as_f64() * 1000.0;
    if us.is_finite() && us > 0.0 {
        us.round() as u64
    } else {
        0
    }
}

pub fn micros_to_ms(us: u64) -> f64 {
    us as f64 / 1000.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micros_round_trip() {
        assert_eq!(ms_to_micros(1.2345f64), 1235);
        assert_eq!(ms_to_micros(0.25f32), 250);
        assert_eq!(ms_to_micros(-3.0f64), 0);
        assert_eq!(ms_to_micros(f64::NAN), 0);
        assert_eq!(micros_to_ms(1500), 1.5);
    }
}
