//! Differentially private GAN training with a noisy feature aggregate in the
//! discriminator's forward pass.

pub mod accountant;
pub mod config;
pub mod data;
pub mod error;
pub mod mechanisms;
pub mod nn;
pub mod noise;
pub mod trainer;

pub use error::{Error, Result};
