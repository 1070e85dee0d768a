//! Scalar abstraction over the floating-point types the solver runs on.

use num_traits::FromPrimitive;

/// Floating-point scalar for all field evaluation and linear algebra: f32 or f64.
pub trait Scalar: nalgebra::RealField + FromPrimitive + Copy {}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an f64 constant to the working scalar type.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 constant must be representable")
}

/// Converts a usize (mode index, counter) to the working scalar type.
#[inline]
pub fn from_usize<T: Scalar>(n: usize) -> T {
    T::from_usize(n).expect("usize must be representable")
}

/// Machine epsilon of the working scalar type.
#[inline]
pub fn eps<T: Scalar>() -> T {
    T::default_epsilon()
}
