//! Iterative GAN for joint face generation and attribute transformation.
//!
//! A generator `G(z, c)`, a discriminator `D` exposing its hidden feature
//! maps and a 1024-wide shared embedding, and an auxiliary classifier `C`
//! that recovers `(z̃, c̃)` from that embedding. Training alternates the
//! ACGAN objective with a reconstruction pass regularized by a weighted sum
//! of per-pixel, perceptual (over `D`'s feature maps) and latent-code losses.

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
