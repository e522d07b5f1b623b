//! Perceptual quality enhancement of compressed video.
//!
//! The pipeline aligns three consecutive decoded luminance frames with a
//! deformable convolution driven by U-Net-predicted offsets, enhances the
//! fused representation with a QP-conditioned encoder-decoder, and trains
//! the whole generator adversarially against a patch discriminator with
//! least-squares GAN, VGG-feature and discriminator-feature-matching
//! objectives. A classical optical-flow alignment backend is included for
//! runtime/quality comparison.

pub mod align;
pub mod bench;
pub mod config;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod flow;
pub mod frame;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
