//! Scalar abstraction for the numeric core.
//!
//! Everything numeric (tensors, autodiff, image math, metrics) is generic
//! over [`Scalar`] so the same code runs in `f32` for training and `f64`
//! for finite-difference gradient checks. Concrete aliases live at the
//! crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable throughout the numeric core.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`. Panics only for exotic types that
    /// cannot represent ordinary finite constants.
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant must convert")
    }

    /// Lossy conversion to `f64` for reporting and serialization.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// Lossy conversion from `usize` counters.
    fn from_usize_c(v: usize) -> Self {
        Self::from_usize(v).expect("count must convert")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
