//! Scalar abstraction for the numeric core.
//!
//! Everything in the engine is written against [`Scalar`], so the whole
//! pipeline can run in `f32` or `f64`. The crate root re-exports `f64`
//! aliases for the common entry types, which is what the CLI uses.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar usable by the engine: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Convert an `f64` literal into this scalar type.
    ///
    /// Used for constants inside generic code; panics only if the literal
    /// does not fit, which cannot happen for the constants we use.
    fn of(value: f64) -> Self {
        Self::from_f64(value).expect("scalar literal out of range")
    }
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
}
