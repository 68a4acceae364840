//! Floating-point abstraction shared by every kernel.
//!
//! Training and inference run in `f32`; gradient verification runs the same
//! code paths in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type tag, stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: DType;

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 literal")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// `ln(1 + e^x)`, evaluated without overflow for large `x`.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::c(20.0) {
        x
    } else if x < T::c(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `x * sigmoid(x)`.
#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// Derivative of [`silu`].
#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Inverse of [`softplus`] for positive arguments.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_matches_closed_form() {
        for &x in &[-30.0f64, -3.0, -0.5, 0.0, 0.5, 3.0, 30.0] {
            let expect = (1.0 + x.exp()).ln();
            assert!((softplus(x) - expect).abs() < 1e-12 * expect.max(1e-300).max(1.0));
        }
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn inverse_softplus_round_trips() {
        for &y in &[1e-3, 1e-2, 0.1, 1.0, 5.0] {
            assert!((softplus(inverse_softplus(y)) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn silu_grad_matches_central_difference() {
        for &x in &[-4.0f64, -1.0, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((silu_grad(x) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(0.0f32), 0.5);
    }
}
