//! Synthetic low-quality image generation.
//!
//! Two pipelines: the classic blur → downsample → noise → JPEG chain used
//! to pre-train restorers, and a camera-like one that injects
//! signal-dependent noise in a linear sensor domain.

mod classic;
mod dataset;
mod isp;

pub use classic::{
    classic_degrade, gaussian_blur, gaussian_kernel, jpeg_roundtrip, ClassicDegradationParams, ClassicRanges,
};
pub use dataset::{
    build_dataset, build_dataset_from_images, load_image_dir, square_resize, DatasetEntry, DatasetManifest, Split,
};
pub use isp::{
    add_camera_noise, process, realistic_degrade, srgb_to_linear, linear_to_srgb, unprocess, IsoPreset, IspParams,
    NoiseModel, RealisticDegradationParams,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::Image;

/// A degradation recipe applied independently to each image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DegradationConfig {
    /// Fixed classic parameters.
    Classic(ClassicDegradationParams),
    /// Classic parameters drawn per image from ranges.
    ClassicRandom(ClassicRanges),
    Realistic(RealisticDegradationParams),
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Classic(p) => p.validate(),
            Self::ClassicRandom(r) => r.validate(),
            Self::Realistic(p) => p.validate(),
        }
    }

    pub fn apply<R: Rng + ?Sized>(&self, img: &Image, rng: &mut R) -> Result<Image> {
        match self {
            Self::Classic(p) => classic_degrade(img, p, rng),
            Self::ClassicRandom(r) => {
                let p = r.sample(img, rng);
                classic_degrade(img, &p, rng)
            }
            Self::Realistic(p) => realistic_degrade(img, p, rng),
        }
    }
}
