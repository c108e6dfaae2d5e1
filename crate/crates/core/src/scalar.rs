//! Floating-point abstraction.
//!
//! All numeric code in this crate is generic over [`Scalar`], which is
//! implemented for `f32` and `f64`. Concrete aliases for the common `f64`
//! instantiations live at the crate root.

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Scalar type the model code is generic over.
///
/// Beyond the arithmetic supplied by `num_traits::Float`, this adds the
/// conversions used for dimension counts and literal constants, plus the
/// random draws the simulator needs (kept on the trait so that sampling
/// stays monomorphic per float width).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Display
    + LowerExp
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Converts a finite `f64` literal.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 literal")
    }

    /// Converts a count.
    fn of_usize(x: usize) -> Self {
        Self::from_usize(x).unwrap_or_else(|| Self::of(x as f64))
    }

    /// Widens to `f64` (exact for both supported widths).
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar widens to f64")
    }

    /// One standard-normal draw.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// One Poisson draw with the given mean (zero for non-positive means).
    fn poisson_draw<R: Rng + ?Sized>(mean: Self, rng: &mut R) -> Self;
}

impl Scalar for f64 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(rand_distr::StandardNormal)
    }

    fn poisson_draw<R: Rng + ?Sized>(mean: Self, rng: &mut R) -> Self {
        if mean <= 0.0 {
            return 0.0;
        }
        rng.sample(rand_distr::Poisson::new(mean).expect("positive finite Poisson mean"))
    }
}

impl Scalar for f32 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let x: f64 = rng.sample(rand_distr::StandardNormal);
        x as f32
    }

    fn poisson_draw<R: Rng + ?Sized>(mean: Self, rng: &mut R) -> Self {
        f64::poisson_draw(mean as f64, rng) as f32
    }
}
