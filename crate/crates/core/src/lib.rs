//! Spectral reconstruction toolkit: recover a hyperspectral cube from an RGB
//! image by splitting the camera's spectral response into observable and
//! unobservable subspaces, compressing the unobservable part with spectral and
//! spatial autoencoders, and sampling it with a conditional latent diffusion
//! model. Includes image/checkpoint I/O, quality metrics, relighting, and an
//! oracle suite of closed-form references used by the acceptance tests.
//!
//! All numerics are generic over the scalar type; the `f64` aliases below are
//! what the pipeline, the CLI, and every golden value are pinned to.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub mod error;
pub mod linalg;

pub mod hsio;
pub mod metrics;
pub mod benchmark;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod relight;
pub mod spaae;
pub mod spectral;
pub mod speuae;
pub mod uldm;

pub use error::{Error, ErrorClass, Result};

/// Floating-point scalar the whole crate is generic over.
///
/// Everything needed is provided by `num-traits` plus assign ops; the blanket
/// impl covers `f32` and `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum<Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lift an `f64` constant into the scalar type.
    fn cst(x: f64) -> Self {
        Self::from_f64(x).expect("constant representable in scalar type")
    }

    /// Lossy view as `f64` (exact for f32/f64).
    fn f64(self) -> f64 {
        self.to_f64().expect("scalar representable as f64")
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + Sum<T>
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
        + Default
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}

/// Default scalar for the shipped pipeline and all golden values.
pub type R = f64;

pub type Cube = hsio::HyperCube<R>;
pub type Ssf = spectral::SpectralSensitivity<R>;
pub type Illum = hsio::Illuminant<R>;
pub type Split = spectral::FeatureSplit<R>;
pub type Stack = nn::LayerStack<R>;
pub type Schedule = uldm::DiffusionSchedule<R>;
