//! Scalar element types for tensors.
//!
//! Training and inference run in `f32`; gradient checks re-run the same
//! graph in `f64`. Everything numeric in this crate is generic over
//! [`Scalar`] so both instantiations share one code path.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Lossy conversion from f64, for constants and RNG output.
#[inline]
pub fn from_f64<S: Scalar>(v: f64) -> S {
    S::from(v).expect("f64 -> scalar conversion")
}

#[inline]
pub fn to_f64<S: Scalar>(v: S) -> f64 {
    v.to_f64().expect("scalar -> f64 conversion")
}
