//! Computational core of spatiotemporal image-to-LiDAR pretraining.

pub mod calib;
pub mod container;
pub mod embedding;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod maps;
pub mod neighbors;
pub mod scene;
pub mod superpoint;
pub mod train;
pub mod vote;

pub use error::{Error, Result};
