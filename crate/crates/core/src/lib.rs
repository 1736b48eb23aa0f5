//! Layered compression for pose-driven 3D Gaussian avatars.
//!
//! An avatar travels as two layers. The structural layer is the weight set
//! of a small convolutional generator that maps pose maps to per-pixel
//! Gaussian attributes. The motion layer carries per-frame pose parameters,
//! coded losslessly, and the pose maps, coded with a lossy intra/inter
//! predictive codec. The decoder regenerates Gaussians from the pose maps,
//! deforms them with linear blend skinning and splats them to an image.

pub mod avatar_model;
pub mod container;
pub mod entropy;
pub mod error;
pub mod generator;
pub mod image;
pub mod loss;
pub mod pipeline;
pub mod pose_space;
pub mod renderer;
pub mod posemap_codec;
pub mod smplx_codec;
pub mod synthetic;
pub mod weight_quant;
mod wire;

pub use error::{Error, Result};
pub use image::{Image, Mask};
