//! Volumetric denoising-diffusion segmentation.
//!
//! A 3D U-Net with averaging skip connections is trained on coordinate-encoded
//! patches (or on full/half resolution volumes for the baselines) to denoise
//! segmentation masks conditioned on image channels, and then sampled over
//! the entire volume in one pass with deterministic DDIM steps.

pub mod error;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod patching;
pub mod pipeline;
pub mod schedule;
pub mod unet;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
