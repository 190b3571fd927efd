//! Floating point scalar abstraction used by the float-side math.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Gathers the traits the float executor and the optimization passes need.
///
/// Implemented for `f32` and `f64`. Quantization parameters are always held in
/// `f64` regardless of the model scalar.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Default
    + Debug
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; saturates to infinities like `as`.
    fn from_f64_lossy(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// Value stored in the little-endian weights blob.
    fn to_blob(self) -> f32;

    fn from_blob(v: f32) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    #[inline]
    fn to_blob(self) -> f32 {
        self
    }
    #[inline]
    fn from_blob(v: f32) -> Self {
        v
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
    #[inline]
    fn to_blob(self) -> f32 {
        self as f32
    }
    #[inline]
    fn from_blob(v: f32) -> Self {
        v as f64
    }
}

/// Rounds half away from zero. The only rounding rule used by the quantizer
/// and the integer kernels.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    // f64::round already rounds half away from zero.
    x.round()
}
