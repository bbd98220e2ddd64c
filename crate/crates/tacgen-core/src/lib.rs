//! Domain foundation for controllable tactile-image generation: frame and
//! label types, the on-disk dataset format, a deterministic synthetic sensor
//! with ground-truth depth, contact-mask geometry, and evaluation metrics.

pub mod error;
pub mod force;
pub mod height;
pub mod image;
pub mod manifest;
pub mod mask;
pub mod metrics;
pub mod pose;
pub mod rng;
pub mod synth;

pub use error::{CoreError, Result};
pub use force::ForceVector;
pub use height::HeightMap;
pub use image::{BackgroundImage, TactileImage};
pub use manifest::{Manifest, Provenance, SampleRecord, SensorConfig, Split};
pub use mask::{ContactMask, MaskTransform};
pub use pose::{ContactPose, ObjectSymmetry};
