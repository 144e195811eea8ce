//! UHDPromer: restoration of very large images by a low-resolution
//! transformer that each block steers with a learned disagreement prior.
//!
//! The network embeds the input at full resolution, builds three
//! hierarchical high-resolution features, and runs a stack of transformer
//! blocks on a pixel-unshuffled low-resolution copy. Each block is guided by
//! a prior measuring how far the mixed high-resolution features disagree
//! with the block's own low-resolution input. A feature super-resolution
//! head lifts the result back to full resolution and drives the final
//! residual reconstruction.

pub mod cli;
pub mod error;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod ndp;
pub mod ndpt;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{Init, ParamStore};
pub use tensor::ImageTensor;
