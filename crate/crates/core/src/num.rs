//! Scalar abstraction: the fusion math is generic over the floating point type.

use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar usable throughout the library: f32 or f64.
pub trait Real:
    nalgebra::RealField + FromPrimitive + ToPrimitive + Copy + Send + Sync + std::fmt::Display
{
    /// Lossy conversion from an f64 constant (exact for f64, rounded for f32).
    fn from_f64_approx(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts to scalar")
    }

    /// Lossy conversion to f64 (exact for f64, widening for f32).
    fn to_f64_approx(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar converts to f64")
    }

    fn from_usize_approx(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize converts to scalar")
    }
}

impl Real for f32 {}
impl Real for f64 {}
