//! Scalar abstraction shared by every numerical routine.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};
use rustfft::FftNum;
use std::fmt::{Debug, Display, LowerExp};

/// Floating point type the solvers are generic over (`f32` or `f64`).
pub trait Real:
    RealField + Copy + FftNum + FromPrimitive + ToPrimitive + Display + LowerExp + Debug
{
}

impl<T> Real for T where
    T: RealField + Copy + FftNum + FromPrimitive + ToPrimitive + Display + LowerExp + Debug
{
}

/// Converts an `f64` literal into the working scalar.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("literal representable in scalar type")
}

/// Converts a working scalar into `f64` for reporting.
#[inline]
pub fn f64_of<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

#[inline]
pub fn from_usize<T: Real>(n: usize) -> T {
    T::from_usize(n).expect("integer representable in scalar type")
}

#[inline]
pub fn from_i64<T: Real>(n: i64) -> T {
    T::from_i64(n).expect("integer representable in scalar type")
}

/// Modulus of a complex number.
#[inline]
pub fn cabs<T: Real>(c: num_complex::Complex<T>) -> T {
    c.re.hypot(c.im)
}
