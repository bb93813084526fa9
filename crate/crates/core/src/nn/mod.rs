//! Layer kernels with explicit forward/backward passes.
//!
//! Forward functions are pure; the caller keeps whatever intermediate tensors
//! the matching backward needs.

pub mod act;
pub mod conv;
pub mod norm;

pub use act::{dropout_mask, leaky_relu, leaky_relu_backward, relu, relu_backward, tanh, tanh_backward};
pub use conv::{col2im, im2col, Conv2d, ConvGeom, ConvTranspose2d};
pub use norm::{instance_norm, instance_norm_backward, NormStats};

/// Negative slope of every leaky ReLU in the networks.
pub const LEAKY_SLOPE: f64 = 0.2;
