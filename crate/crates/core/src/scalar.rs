//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type: `f32` or `f64`.
///
/// Pulls in `LinalgScalar` so that `ndarray` can route matrix products
/// through its optimized kernels for both widths.
pub trait Scalar:
    Float
    + NumAssign
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; exact for every value representable in `Self`.
    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Short dtype tag used in on-disk formats.
    const DTYPE: &'static str;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    const DTYPE: &'static str = "f64";
}

/// Converts a count or index into the scalar type.
#[inline]
pub fn cast<T: Scalar>(n: usize) -> T {
    T::of(n as f64)
}
