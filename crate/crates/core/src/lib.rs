//! Unsupervised adaptation of image restorers with low-frequency-guided
//! diffusion pseudo targets.

pub mod checkpoint;
pub mod corpus;
pub mod ddpm;
pub mod degrade;
pub mod denoiser;
pub mod error;
pub mod features;
pub mod guidance;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod resample;
pub mod restore;
pub mod restorer;
pub mod schedule;
pub mod unet;

pub use error::{Error, Result};
pub use image::{Domain, Image};
