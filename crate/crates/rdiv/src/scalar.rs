//! Scalar abstraction for the numeric core.
//!
//! The deterministic linear-algebra kernels (inverse problems, sieves, the
//! optimizer) are generic over the floating type; the statistical estimators
//! use the crate-root aliases over `f64`.

use nalgebra::RealField;
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating scalar usable by the numeric core: nalgebra decompositions plus
/// `num_traits` arithmetic plus seeded Gaussian sampling.
pub trait Scalar: RealField + Float + FromPrimitive + Copy + Default {
    /// Draw from the standard normal distribution.
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Lossy conversion from `f64` (panics only for exotic types).
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 conversion")
    }

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn as_f64(self) -> f64 {
        self
    }
}
