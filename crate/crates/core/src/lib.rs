//! Semantic segmentation on top of a frozen conditional denoiser.
//!
//! The pipeline inverts an image through a small text-conditioned U-Net, records
//! decoder features and cross-attention maps along the inversion trajectory,
//! fuses them with a trainable convolutional block and decodes them with a
//! segmentation head. Training runs a mask-conditioned teacher branch next to an
//! unconditional student branch that shares all trainable weights; prediction
//! uses the unconditional branch only.

pub mod benchmark;
pub mod cache;
pub mod condition;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod features;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod path_control;
pub mod schedule;
pub mod seg;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};
