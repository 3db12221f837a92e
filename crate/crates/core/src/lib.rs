//! Audio-driven video scene editing on a desk-scale latent diffusion stack.
//!
//! Everything is generic over the scalar type via [`scalar::Scalar`]
//! (implemented for `f32` and `f64`); the aliases at the crate root pin the
//! default precision used by the pipeline and CLI.

pub mod ascv;
pub mod audio;
pub mod conditioning;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod fft;
pub mod metrics;
pub mod pipeline;
pub mod scalar;
pub mod synth;
pub mod volume;

pub use error::{AvError, Result};
pub use scalar::Scalar;

/// Default scalar type for the end-to-end pipeline.
pub type Real = f64;
/// Latent feature volume at default precision.
pub type Latent = volume::Volume<Real>;
/// Pixel-space video at default precision.
pub type Pixels = volume::Volume<Real>;
