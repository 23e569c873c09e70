use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};

/// Floating-point element type for the dense linear algebra and the closed forms.
pub trait Scalar: Float + FromPrimitive + Debug + Display + Send + Sync + 'static {
    /// Converts an `f64` literal, panicking only for types that cannot represent it.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("scalar literal out of range")
    }
}

impl<T> Scalar for T where T: Float + FromPrimitive + Debug + Display + Send + Sync + 'static {}
