//! Seed-noise optimization for training-free inpainting with flow models.
//!
//! The initial noise of a deterministic flow sampler is optimized so that
//! the denoised output reproduces the observed part of an image. The
//! gradient comes from a straight-line approximation of the sampling
//! trajectory, so no backpropagation through the denoiser is needed; the
//! optimization runs on the seed's 2-D Fourier coefficients, and updates to
//! unobserved seed cells are discarded after each step. The optimized seed
//! then drives a blended-denoising inpainter.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the scalar for typical use.

pub mod data;
pub mod error;
pub mod fields;
pub mod flow;
pub mod inpaint;
pub mod io;
pub mod latent;
pub mod metrics;
pub mod optim;
pub mod oracle;
pub mod scalar;
pub mod seedopt;
pub mod spectral;

pub use error::{Result, SonicError};
pub use fields::{apply_mask, gaussian_field, MaskField, SeedRng, Shape};
pub use flow::{ClassId, GuidanceConfig, SamplerConfig, VelocityModel};
pub use scalar::Scalar;

pub type Field64 = fields::Field<f64>;
pub type Field32 = fields::Field<f32>;
pub type Spectrum64 = spectral::Spectrum<f64>;
pub type Spectrum32 = spectral::Spectrum<f32>;
pub type ConvNet64 = flow::ConvVelocityNet<f64>;
pub type ConvNet32 = flow::ConvVelocityNet<f32>;
pub type SeedState64 = seedopt::SeedState<f64>;
pub type SeedState32 = seedopt::SeedState<f32>;
