//! Multi-modal (RGB / depth / IR) face anti-spoofing for low-quality surveillance crops.
//!
//! The crate is organised along the processing chain:
//!
//! * [`depth_prep`] turns raw wide-range depth and IR frames into hole-free 8-bit face crops.
//! * [`quality_degrade`] simulates surveillance-grade capture and scores distortion.
//! * [`afa_net`] is the attention network with its super-resolution feature augmentation.
//! * [`objective_metrics`] holds the training losses and the PAD evaluation protocol.
//! * [`train_harness`] drives SGD training, augmentation and checkpointing.
//! * [`dataset_io`] reads and writes manifests and generates synthetic data.
//!
//! [`nn`] is the small reverse-mode autodiff engine the network is built on.

pub mod afa_net;
pub mod dataset_io;
pub mod depth_prep;
mod error;
pub mod image;
pub mod nn;
pub mod objective_metrics;
pub mod quality_degrade;
pub mod train_harness;

pub use error::{Error, Result};

/// Round half away from zero for non-negative values, i.e. `floor(x + 0.5)`.
#[inline]
pub(crate) fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}
