//! Mapping priors for LiDAR 3D detection.
//!
//! Builds surfel and 3D-Gaussian scene priors from multi-traversal point
//! clouds, fuses them with LiDAR and camera BEV features through gated
//! residual fusion, and trains a small detection head on synthetic scenes.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod detection;
pub mod error;
pub mod fusion;
pub mod gaussian;
pub mod gradcheck;
pub mod io;
pub mod geom;
pub mod nn;
pub mod surfel;
pub mod synth;
pub mod trainer;
pub mod voxel;

pub use error::{Error, Result};
