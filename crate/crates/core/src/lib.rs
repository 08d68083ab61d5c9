//! Bernoulli-diffusion segmentation toolkit.
//!
//! A discriminative segmentor proposes a per-pixel probability mask; a
//! Bernoulli diffusion refiner, trained collaboratively with it, walks a
//! binarized latent mask from a prior-seeded start back to a clean
//! segmentation. The crate provides the closed-form diffusion mathematics,
//! a minimal reverse-mode autodiff engine with the training losses, small
//! reference networks including an optional bit-packed XNOR compute path,
//! the alternate training loop and samplers, and metrics plus file formats
//! for end-to-end runs.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` for training,
//! `f64` for gradient-check oracles).

pub mod autodiff;
pub mod bitops;
pub mod error;
pub mod evalio;
pub mod kernel;
pub mod losses;
pub mod map;
pub mod models;
pub mod rng;
pub mod scalar;
pub mod schedule;

pub use error::{Error, Result};
pub use map::{BinaryMask, ProbMap};
pub use rng::RngState;
pub use schedule::NoiseSchedule;
