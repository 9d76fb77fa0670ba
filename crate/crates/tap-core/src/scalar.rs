//! Scalar abstraction: every numeric component in this crate is generic over a
//! floating-point scalar so the same code instantiates at `f32` (fast training) and
//! `f64` (analysis-grade numerics). See the crate root for the concrete aliases.

use num_traits::{Float, NumAssignOps};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar the whole stack is generic over.
///
/// `Float` supplies ordering, arithmetic, `exp`/`ln`/`sqrt` and friends;
/// `NumAssignOps` the compound-assignment operators the hot loops use; the rest is
/// plumbing so tensors can be printed, defaulted, summed and sent across threads.
pub trait Scalar:
    Float + NumAssignOps + Sum + Copy + Send + Sync + Debug + Display + Default + 'static
{
    /// Short human-readable name recorded in run metadata (`"f32"` / `"f64"`).
    const NAME: &'static str;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

/// Lossy-but-checked conversion from `f64` literals into the working scalar.
#[inline]
pub fn cast<F: Scalar>(x: f64) -> F {
    F::from(x).expect("finite f64 must convert into the working scalar")
}

/// Widen the working scalar back to `f64` (used when reporting results).
#[inline]
pub fn to_f64<F: Scalar>(x: F) -> f64 {
    x.to_f64().expect("scalar widens to f64")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_generic<F: Scalar>(xs: &[F]) -> F {
        xs.iter().copied().sum()
    }

    #[test]
    fn both_instantiations_do_arithmetic() {
        let a: f32 = cast::<f32>(0.5);
        let b: f64 = cast::<f64>(0.5);
        assert_eq!(a as f64, b);
        assert_eq!(sum_generic(&[1.0f32, 2.0, 3.0]), 6.0);
        assert_eq!(sum_generic(&[1.0f64, 2.0, 3.0]), 6.0);
        assert_eq!(f32::NAME, "f32");
        assert_eq!(f64::NAME, "f64");
        assert_eq!(to_f64(2.25f32), 2.25);
    }
}
