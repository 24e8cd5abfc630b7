//! End-to-end trainable 3D semantic segmentation for point clouds.
//!
//! The pipeline voxelizes a point cloud, runs a small 3D fully convolutional
//! network over the grid, transfers the coarse per-voxel class scores back to
//! the raw points by trilinear interpolation, and refines the point-level
//! distribution with a fully connected CRF (Gaussian edge potentials, mean
//! field inference unrolled as a recurrent module). Every stage is
//! differentiable, so the whole chain trains jointly with SGD.
//!
//! Module map:
//! - [`cloud`]: point cloud data model, ASCII/PLY I/O, spatial cropping
//! - [`augment`]: training-time color jitter, rotation, scaling, sub-sampling
//! - [`voxel`]: metric voxel grids with occupancy/RGB/intensity channels
//! - [`autodiff`]: dense f64 tensors and reverse-mode gradients for the
//!   handful of operators the network needs
//! - [`fcnn`]: the residual 3D network producing per-voxel logits at 4x
//!   downsampling
//! - [`trilinear`]: voxel-to-point score transfer and its adjoint splat
//! - [`crf`]: dense CRF energy, mean-field inference and gradients, with
//!   brute-force and permutohedral-lattice filter backends
//! - [`train`]: two-stage optimization and the bandwidth grid search
//! - [`metrics`]: confusion matrix, per-class accuracy/IOU, mAcc/mIOU
//! - [`synth`]: synthetic indoor room generator for desk-scale experiments
//! - [`config`]: plain-text `section.key = value` run configuration

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod cloud;
pub mod config;
pub mod crf;
pub mod error;
pub mod fcnn;
pub mod lattice;
pub mod metrics;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod trilinear;
pub mod voxel;

pub use error::{Error, Result};
pub use tensor::Tensor;
