//! Floating-point abstraction shared by every numeric module.
//!
//! The laboratory is written once over [`Scalar`] and instantiated for
//! `f64` (the default, used by the crate-root aliases) and `f32`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real number type usable by the policy, reward and optimizer code.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Width of the little-endian encoding used in checkpoints.
    const BYTES: usize;
    /// Short type tag written into checkpoint headers.
    const TAG: u8;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;
    const TAG: u8 = b'd';

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(buf)
    }
}

impl Scalar for f32 {
    const BYTES: usize = 4;
    const TAG: u8 = b'f';

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 4];
        buf.copy_from_slice(&bytes[..4]);
        f32::from_le_bytes(buf)
    }
}

/// Shorthand for [`Scalar::lit`].
#[inline]
pub fn lit<S: Scalar>(x: f64) -> S {
    S::lit(x)
}

/// Draws a standard normal variate in the working precision.
#[inline]
pub fn std_normal<S: Scalar, R: rand::Rng + ?Sized>(rng: &mut R) -> S {
    let z: f64 = rng.sample(rand_distr::StandardNormal);
    S::lit(z)
}
