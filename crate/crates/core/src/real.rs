use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the differentiable pipeline is generic over.
///
/// Training runs in `f32`; gradient verification instantiates the same code in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Raw little-endian `f32` encoding used by checkpoints.
    fn to_f32_bits(self) -> f32 {
        self.to_f32().unwrap_or(f32::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
