//! Desk-scale differentiable Gaussian splatting: a coarse-to-fine Gaussian
//! hierarchy driven by a dual-masked transformer, rendered by a software
//! rasterizer with analytic gradients, and trained end to end on synthetic
//! multi-view scenes.
//!
//! The crate is organized as a library; `examples/` holds one runnable
//! example per major capability and `src/bin/usplat.rs` is a thin CLI over
//! the same APIs.

pub mod camera;
pub mod config;
pub mod diff;
pub mod gaussians;
pub mod gradsuite;
pub mod io;
pub mod loss;
pub mod masking;
pub mod math;
pub mod metrics;
pub mod network;
pub mod raster;
pub mod scene;
pub mod trainer;
