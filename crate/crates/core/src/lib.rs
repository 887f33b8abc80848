//! Fruit segmentation on colorized LiDAR point clouds.
//!
//! The crate covers the whole pipeline: reading and cleaning clouds, colorizing
//! LiDAR sweeps from a calibrated camera, splitting scenes into octree blocks,
//! a set-abstraction / feature-propagation network with a late color branch
//! (running on a small reverse-mode autodiff engine), imbalance-aware training,
//! and mIoU evaluation. A synthetic orchard generator supplies labeled scenes.

pub mod autodiff;
pub mod cloud;
pub mod config;
pub mod error;
pub mod fusion;
pub mod kernels;
pub mod metrics;
pub mod octree;
pub mod segnet;
pub mod synth;
pub mod train;

pub use cloud::{PointCloud, VoxelSpec};
pub use error::{Error, Result};

/// Cartesian point in meters.
pub type Point3 = [f64; 3];

#[inline]
pub(crate) fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}
