//! Floating point abstraction so the numeric core runs in either f32 or f64.
//!
//! Training and file formats use single precision; gradient checking against
//! finite differences needs double precision. Everything numeric downstream is
//! generic over [`Scalar`] and instantiated with one of the two.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssignOps};
use rand::Rng;
use rand_distr::StandardNormal;

pub trait Scalar:
    Float + NumAssignOps + Sum + Debug + Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn from_f32(v: f32) -> Self;
    fn as_f64(self) -> f64;
    fn as_f32(self) -> f32;

    /// One draw from N(0, 1) in this precision.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn from_f32(v: f32) -> Self {
                v as $t
            }
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn as_f32(self) -> f32 {
                self as f32
            }
            #[inline]
            fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
                rng.sample(StandardNormal)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conversions_round_trip() {
        assert_eq!(<f32 as Scalar>::from_f64(1.5), 1.5f32);
        assert_eq!(<f64 as Scalar>::from_f32(0.25), 0.25f64);
        assert_eq!(Scalar::as_f64(2.0f32), 2.0f64);
        assert_eq!(<f64 as Scalar>::from_usize(7), 7.0);
    }

    #[test]
    fn normal_draws_are_seed_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..32 {
            let x: f64 = Scalar::standard_normal(&mut a);
            let y: f64 = Scalar::standard_normal(&mut b);
            assert_eq!(x, y);
        }
    }
}
