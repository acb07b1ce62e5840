//! Scalar storage types accepted by the numeric code.

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type for tensor storage.
///
/// Everything numeric in this crate is generic over `Scalar` so the same
/// kernels can run in `f32` (pipeline, file formats) and `f64` (tests that
/// pin 64-bit tolerances). Reductions convert through `f64` regardless of
/// the storage type.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Lossless widening to `f64` (both supported types embed exactly).
    fn to_f64_lossless(self) -> f64 {
        self.to_f64().expect("finite scalar widens to f64")
    }

    /// Narrowing from `f64` with round-to-nearest.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 narrows to storage scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
