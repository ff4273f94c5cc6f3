//! Skeleton-conditioned triplane reposing with a conditional diffusion U-Net.

pub mod denoiser;
pub mod diffusion;
pub mod pipeline;

pub mod error;
pub mod renderer;
pub mod rng;
pub mod skeleton;
pub mod synthetic;
pub mod tensor;
pub mod triplane;

pub use error::{Error, Result};
pub use tensor::Tensor;
