//! Floating-point scalar abstraction.
//!
//! All numeric kernels are generic over [`Scalar`], which is implemented for
//! `f32` and `f64`. Training is pinned to `f64`; the inference path may be
//! instantiated at either width.

use ndarray::LinalgScalar;
use num_traits::{Float, NumAssign};

/// Scalar element type of tensors: `f32` or `f64`.
pub trait Scalar:
    Float
    + NumAssign
    + LinalgScalar
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64` (exact for `f64`, rounded for `f32`).
    fn from_f64(v: f64) -> Self;

    /// Widening conversion to `f64`.
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}
