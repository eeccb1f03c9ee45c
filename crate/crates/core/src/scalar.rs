//! Floating-point scalar abstraction shared by every model component.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar usable by the autodiff tape: `f32` for training, `f64` for
/// gradient checks.
pub trait Scalar:
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
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Dtype code used by the on-disk tensor format.
    const DTYPE_CODE: u8;

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }

    fn to_le_bytes_vec(self, out: &mut Vec<u8>);

    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE_CODE: u8 = 0;

    fn to_le_bytes_vec(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE_CODE: u8 = 1;

    fn to_le_bytes_vec(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}
