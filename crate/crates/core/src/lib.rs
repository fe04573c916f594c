//! Streaming dynamic Gaussian splatting on an orthographic canonical camera.
//!
//! Scenes are sets of [`DynamicGaussian`]s: a static 3D Gaussian plus a
//! linear velocity and an opacity lifecycle. The [`raster`] module renders
//! them, [`predictor`] produces them from RGB-D frames, and [`engine`] runs the
//! online two-frame fusion loop.

pub mod deformation;
pub mod engine;
pub mod error;
pub mod gaussian;
pub mod image;
pub mod losses;
pub mod predictor;
pub mod raster;
pub mod sampler;
pub mod scene;
pub mod synth;

pub use error::{Error, Result};
pub use gaussian::{
    covariance_from_rs, normalize_quaternion, DeformationParams, DynamicGaussian, GaussianId,
    Quaternion, Splat, StaticGaussian,
};
pub use image::ImageBuffer;
pub use raster::{OrthoCamera, RasterConfig};
