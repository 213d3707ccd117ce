//! Desk-scale predictive-geometry manipulation policy.
//!
//! The crate trains and runs a small end-effector control policy whose
//! transformer trunk is supervised, at training time only, by two predictive
//! side tasks: multi-step 3D keypoint trajectory regression and future
//! workspace geometry forecast as 3D Gaussians rendered into depth maps.
//! Inference runs the trunk and the flow-matching action expert alone; the
//! geometry decoders never execute.
//!
//! Module map:
//! - [`tensor`]: reverse-mode autodiff over dense row-major tensors.
//! - [`encoding`]: 1D temporal and factored 3D spatial sinusoidal tables.
//! - [`tracks`]: keypoint history encoder and future trajectory decoder.
//! - [`geometry`]: spatial queries, voxel decoder, Gaussian heads, refinement.
//! - [`render`]: differentiable depth-only Gaussian splatting.
//! - [`policy`]: block-causal trunk, flow-matching action expert, KV cache.
//! - [`env`]: synthetic articulated-arm data source (kinematics + ray casting).
//! - [`config`] / [`model`] / [`train`]: run configuration, parameter store,
//!   the training loop, evaluation, and checkpointing.
//! - [`gradcheck`]: finite-difference verification entry points.

pub mod config;
pub mod encoding;
pub mod env;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod policy;
pub mod render;
pub mod scalar;
pub mod tensor;
pub mod tracks;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{GraphRef, Tensor};
