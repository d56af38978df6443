//! Lifting single-view 2D pose sequences to global 3D motion with
//! line-conditioned and multi-view 2D motion diffusion.

pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod lift3d;
pub mod metrics;
pub mod motion;
pub mod mv_optimize;

pub use error::{Error, Result};
