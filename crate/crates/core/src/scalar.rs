//! Scalar abstraction over the floating-point element type.
//!
//! Training runs in `f32`; gradient checks run the same code in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Element type for all tensors in this crate.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from `f64` literals and hyperparameters.
    fn from_f64_lossy(x: f64) -> Self {
        Self::from(x).expect("f64 -> scalar conversion")
    }

    /// Conversion to `f64` for metrics and reporting.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar -> f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for `F::from_f64_lossy`.
#[inline]
pub fn sc<F: Scalar>(x: f64) -> F {
    F::from_f64_lossy(x)
}
