//! Scalar bounds for the analytic models.
//!
//! Polynomial models (the retry formulas, the Ack-length sum) only need field
//! arithmetic, so they accept exact rationals as well as floats. Models that
//! take logarithms or non-integer powers need [`Real`].

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, Num};

/// Ordered field with conversions from primitive integers.
pub trait Scalar: Clone + Debug + PartialOrd + Num + FromPrimitive {}

impl<T> Scalar for T where T: Clone + Debug + PartialOrd + Num + FromPrimitive {}

/// Floating-point scalar (`f32`, `f64`).
pub trait Real: Scalar + Float {}

impl<T> Real for T where T: Scalar + Float {}

pub(crate) fn lit<T: FromPrimitive>(v: f64) -> T {
    T::from_f64(v).expect("literal representable in scalar type")
}

pub(crate) fn int<T: FromPrimitive>(v: u64) -> T {
    T::from_u64(v).expect("integer representable in scalar type")
}
