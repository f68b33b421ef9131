//! Fissure-aware lung lobe segmentation training machinery on dense 3D volumes.
//!
//! The crate provides the attentive cross-entropy loss, a differentiable
//! fissure generation module built from max pooling and voxel-wise products,
//! a registration-based auxiliary loss, synthetic five-lobe phantoms, a small
//! trainer, and the usual overlap and surface-distance metrics.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod morphology;
pub mod registration;
pub mod synth;
pub mod trainer;
pub mod volume;
pub mod vvol;

pub use error::{Error, Result};
