//! Scalar abstraction for times, bandwidths and load estimates.
//!
//! Byte and token counts stay integral (`u64`) throughout the crate so that
//! volume identities hold exactly; only quantities that are inherently real
//! valued (seconds, bytes/second, averaged loads) go through [`Scalar`].

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point type usable by the cost model and simulator.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Converts a count into the scalar domain.
    fn of_u64(v: u64) -> Self {
        Self::from_u64(v).expect("u64 is representable in every float type")
    }

    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("usize is representable in every float type")
    }

    fn of_f64(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every float type")
    }

    /// `max(0, self)`.
    fn non_negative(self) -> Self {
        if self > Self::zero() {
            self
        } else {
            Self::zero()
        }
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
