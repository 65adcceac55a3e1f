//! Axial super-resolution of anisotropic 3D volumes.
//!
//! A 2D mean-reverting-SDE diffusion model restores laterally degraded
//! slices, the recovered volume trains a 3D interpolation network (DGEAN),
//! and the trained network restores axial resolution. Ships with a metric
//! suite (per-plane PSNR/SSIM, FSC-0.5 resolution, IoU/Dice) and procedural
//! phantom volumes for desk-scale experiments.

pub mod degradation;
pub mod dgean;
pub mod error;
pub mod irsde;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod resample;
pub mod volume;

pub use error::{D2rError, Result};
pub use volume::{Plane, SliceImage, Volume};
