//! Dense RGB-D SLAM over a sparse multiresolution hash-grid TSDF map.
//!
//! The map is a set of per-level hash tables of learnable features plus two
//! small decoders (TSDF and color). Camera poses and map parameters are
//! optimized jointly by differentiating a TSDF-based volume renderer against
//! photometric and geometric residuals. Keyframes enter a globally constrained
//! sliding window chosen from pose geometry alone, and pixels are sampled once
//! per keyframe in the camera frame (corner features plus a stratified uniform
//! grid), then re-projected with the current pose estimate each iteration.
//!
//! The crate ships a CLI (`tsdf-slam`) covering synthetic dataset generation,
//! full SLAM runs, mesh extraction, evaluation metrics, gradient verification,
//! and the sampling/window ablation grid.

pub mod config;
pub mod dataset;
pub mod diff;
pub mod driver;
pub mod error;
pub mod eval;
pub mod loss;
pub mod map;
pub mod math;
pub mod render;
pub mod sampling;
pub mod slam;

pub use error::{Result, SlamError};
pub use math::Real;
