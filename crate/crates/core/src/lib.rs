//! Incremental panoptic 3D reconstruction at desk scale.
//!
//! The pipeline consumes a posed RGB trajectory, streams it into fragments of
//! keyframes, and for each fragment:
//!
//! 1. estimates a depth prior over the fragment bounding volume from masked
//!    multi-view feature variance ([`depth_prior`]),
//! 2. predicts surface occupancy and TSDF values coarse-to-fine on a sparse
//!    voxel hierarchy with temporal GRU fusion ([`recon`]),
//! 3. segments the final occupied voxels with a mask-transformer head and
//!    fuses instances across fragments ([`panoptic`]),
//! 4. integrates into a global scene and extracts a labeled mesh ([`mesh`]).
//!
//! Everything learnable runs on a small reverse-mode differentiation core
//! ([`nncore`]); synthetic scenes, ground truth, and evaluation metrics live
//! in [`synth`] and [`metrics`].

pub mod config;
pub mod depth_prior;
pub mod error;
pub mod exec;
pub mod features;
pub mod geometry;
pub mod mesh;
pub mod metrics;
pub mod model;
pub mod nncore;
pub mod panoptic;
pub mod pipeline;
pub mod recon;
pub mod synth;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
