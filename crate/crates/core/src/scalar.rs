//! Scalar abstraction shared by the solvers, the surrogate and the steering math.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};
use rustfft::FftNum;

/// Floating point type the crate computes in: `f32` or `f64`.
///
/// Everything numeric is generic over this trait. Files on disk are always
/// float32, so values pass through [`Scalar::to_f32_lossy`] / [`Scalar::of_f32`]
/// at the I/O boundary.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + FftNum
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from a literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("scalar literal")
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("scalar from usize")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    #[inline]
    fn to_f32_lossy(self) -> f32 {
        ToPrimitive::to_f32(&self).unwrap_or(f32::NAN)
    }

    #[inline]
    fn of_f32(v: f32) -> Self {
        <Self as FromPrimitive>::from_f32(v).expect("scalar from f32")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
