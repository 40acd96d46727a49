//! Task-guided GAN augmentation for age regression on volumetric images.
//!
//! The crate is organized around a small reverse-mode autodiff engine for
//! dense rank-5 feature maps ([`diffgrid`]), the three networks built on it
//! ([`nets`]), the WGAN-GP / L1 / task objectives ([`objectives`]), latent
//! interpolation and dataset balancing ([`latentsynth`]), a synthetic
//! volumetric phantom ([`phantom`]), the training loops ([`trainer`]) and
//! evaluation statistics ([`evalstat`]).
//!
//! Numeric code is generic over the scalar type through [`scalar::Scalar`];
//! the shipped pipelines run in double precision via the aliases below.

pub mod diffgrid;
pub mod evalstat;
pub mod latentsynth;
pub mod nets;
pub mod objectives;
pub mod phantom;
pub mod trainer;
pub mod scalar;

pub use scalar::Scalar;

/// Double-precision tape, the type every shipped pipeline trains on.
pub type Tape64 = diffgrid::Tape<f64>;
/// Double-precision tensor.
pub type Tensor64 = diffgrid::DiffTensor<f64>;
/// Single-precision tape, exercised by tests to keep the core generic.
pub type Tape32 = diffgrid::Tape<f32>;
/// Single-precision tensor.
pub type Tensor32 = diffgrid::DiffTensor<f32>;
