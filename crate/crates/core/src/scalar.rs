//! Floating-point scalar abstraction.
//!
//! All numeric code in this crate is generic over [`Scalar`], which is
//! implemented for `f32` and `f64`. Tests run the 64-bit instantiation for
//! headroom; production paths (dataset generation, the CLI default) use the
//! 32-bit one. Convenience aliases for both live at the crate root.

use std::fmt;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rustfft::FftNum;

/// Real scalar type the whole crate is generic over: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + FftNum
    + Default
    + fmt::Display
    + fmt::LowerExp
    + Send
    + Sync
    + 'static
{
    /// Short type name used in diagnostics and CLI output.
    const NAME: &'static str;

    fn of(x: f64) -> Self;
    fn of_usize(n: usize) -> Self;
    fn as_f64(self) -> f64;
    /// Storage conversion: all on-disk payloads are little-endian `f32`.
    fn as_f32(self) -> f32;
    fn of_f32(x: f32) -> Self;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn of_usize(n: usize) -> Self {
        n as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
    #[inline]
    fn of_f32(x: f32) -> Self {
        x
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn of_usize(n: usize) -> Self {
        n as f64
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self as f32
    }
    #[inline]
    fn of_f32(x: f32) -> Self {
        x as f64
    }
}
