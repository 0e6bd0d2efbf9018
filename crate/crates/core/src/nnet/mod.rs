//! Dense tensors, layer kernels with hand-derived backward passes, and the
//! U-Net assembled from them.
//!
//! Everything is generic over [`Real`] so the same code runs in 32-bit for
//! training and in 64-bit for finite-difference gradient checks.

pub mod gradcheck;
pub mod layers;
pub mod tensor;
pub mod unet;

pub use layers::*;
pub use tensor::{Real, Tensor};
pub use unet::{init_params, Trace, UNet, UNetConfig};
