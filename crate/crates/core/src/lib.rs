//! Unified conditional motion diffusion for egocentric reconstruction,
//! forecasting and generation, with the supporting kinematics, motion
//! representation, multi-view fitting, metrics and data formats.

pub mod dataio;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod fitting;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod repr;
pub mod se3;
pub mod tensor;

pub use error::{Error, Result};
