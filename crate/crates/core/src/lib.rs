//! Teacher-student knowledge distillation for conditional image-to-image GANs.
//!
//! A heavy U-Net generator and PatchGAN discriminator are trained first; a
//! narrow student pair is then distilled from them with pixel, discriminator
//! feature, teacher-as-real and triplet terms, and all generators are scored
//! by a segmentation network trained on real photos.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod nn;
pub mod optim;
pub mod par;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
