//! Scalar abstraction shared by every numeric kernel in this crate.
//!
//! All math is generic over [`Scalar`], implemented for `f32` and `f64`.
//! Concrete aliases at the crate root fix `f64` as the pipeline default.

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssign};
use serde::{de::DeserializeOwned, Serialize};
use std::fmt::{Debug, Display};

/// Floating-point scalar usable in latents, schedules, and scores.
pub trait Scalar:
    'static
    + Send
    + Sync
    + Float
    + FromPrimitive
    + NumAssign
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Serialize
    + DeserializeOwned
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for lifting an `f64` literal into a generic scalar.
pub(crate) fn fp<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("f64 literal must convert into the scalar type")
}

/// Lossy view of a generic scalar for error messages and reports.
pub(crate) fn lossy<F: Scalar>(x: F) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}
