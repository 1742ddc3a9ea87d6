//! Scalar abstraction used throughout the crate.
//!
//! All numeric kernels (tensors, FFTs, network layers, optimizers) are
//! generic over [`Real`] so the same code runs in `f32` for training speed
//! and in `f64` for high-precision gradient checks. Only the two standard
//! float types implement the trait.

use num_traits::Float;

/// Floating-point scalar the engine can compute with.
///
/// Extends [`num_traits::Float`] with infallible conversions to and from
/// `f64`. Conversions through `f64` are how seeds, statistics, and
/// trigonometric tables are produced, which keeps random streams and
/// twiddle factors identical across scalar types (modulo the final cast).
pub trait Real:
    Float + Send + Sync + std::fmt::Debug + std::fmt::Display + Default + 'static
{
    /// Lossy conversion from `f64` (rounds to nearest for `f32`).
    fn from_f64(v: f64) -> Self;
    /// Widening (for `f32`) or identity (for `f64`) conversion.
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
