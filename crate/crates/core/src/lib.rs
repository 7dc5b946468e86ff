//! Anchor-based Gaussian-splatting photorealistic mapping on CPU.
//!
//! Point clouds are voxelized into fixed anchor points; tiny MLPs decode
//! each anchor into renderable 3D Gaussians conditioned on view geometry
//! and a pose-derived appearance embedding; a differentiable tile
//! rasterizer and a frequency-pyramid loss drive training. A robust
//! bundle-adjustment module and synthetic dataset tooling round out the
//! pipeline.

pub mod camera;
pub mod datakit;
pub mod decoders;
pub mod geometry;
pub mod img;
pub mod losses;
pub mod math;
pub mod render;
pub mod scene;
pub mod train;

pub use camera::{CameraPose, PinholeCamera};
pub use img::ImageBuf;
