//! Steering pretrained diffusion policies with gradients from a separately
//! trained dynamics model, in a small 2D block-touch world.

pub mod baselines;
pub mod blockworld;
pub mod diffusion;
pub mod dynamics;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod numerics;

pub use error::{Error, Result};
