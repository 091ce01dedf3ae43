//! Generator, discriminator and auxiliary classifier.
//!
//! All three networks keep their weights in a [`ParamStore`] and run on a
//! caller-provided [`Tape`], so the same forward code serves training,
//! inference and gradient checks.

mod bundle;
mod classifier;
mod discriminator;
mod generator;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Var};

pub use bundle::{init_params, Inspection, ModelBundle};
pub use classifier::{ClassifierOutput, ClassifierParams};
pub use discriminator::{DiscriminatorOutput, DiscriminatorParams};
pub use generator::GeneratorParams;
pub use params::{ParamStore, RunningStats, BN_MOMENTUM};

pub const KERNEL: usize = 5;
pub const STRIDE: usize = 2;
pub const PAD: usize = 2;
pub const Z_DIM: usize = 100;
pub const SHARED_DIM: usize = 1024;
pub const CLASSIFIER_HIDDEN: usize = 128;
pub const LEAK: f64 = 0.2;
pub const INIT_STD: f64 = 0.02;

const GEN_WIDTHS: [usize; 4] = [512, 256, 128, 64];
const DISC_WIDTHS: [usize; 4] = [64, 128, 256, 512];

/// Keeps squashed activations strictly inside their open ranges even when
/// the `f32` tanh/sigmoid would round to the endpoint.
const OPEN_MARGIN: f64 = 1.0 / (1u32 << 20) as f64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Side of the square images, a multiple of 16.
    pub image_size: usize,
    /// Number of binary attributes `d`.
    pub attr_count: usize,
    pub z_dim: usize,
    /// Scales every convolutional channel width.
    pub width_multiplier: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            image_size: 128,
            attr_count: 40,
            z_dim: Z_DIM,
            width_multiplier: 1.0,
        }
    }
}

impl ArchConfig {
    pub fn new(image_size: usize, attr_count: usize, width_multiplier: f64) -> Result<Self> {
        let cfg = ArchConfig {
            image_size,
            attr_count,
            z_dim: Z_DIM,
            width_multiplier,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || self.image_size % 16 != 0 {
            return Err(Error::Argument(format!(
                "image_size must be a positive multiple of 16, got {}",
                self.image_size
            )));
        }
        if self.attr_count == 0 {
            return Err(Error::Argument("attr_count must be at least 1".into()));
        }
        if self.z_dim == 0 {
            return Err(Error::Argument("z_dim must be at least 1".into()));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::Argument(format!(
                "width_multiplier must be positive, got {}",
                self.width_multiplier
            )));
        }
        Ok(())
    }

    /// Spatial side of the generator's first feature map.
    pub fn base(&self) -> usize {
        self.image_size / 16
    }

    fn scaled(&self, c: usize) -> usize {
        ((c as f64 * self.width_multiplier).round() as usize).max(1)
    }

    /// Channels of the generator's projected map and its three hidden
    /// transposed-conv stages; the last stage always emits 3.
    pub fn generator_widths(&self) -> [usize; 4] {
        GEN_WIDTHS.map(|c| self.scaled(c))
    }

    pub fn discriminator_widths(&self) -> [usize; 4] {
        DISC_WIDTHS.map(|c| self.scaled(c))
    }

    /// Length of the flattened last discriminator map.
    pub fn flat_features(&self) -> usize {
        let b = self.base();
        b * b * self.discriminator_widths()[3]
    }
}

pub(crate) fn tanh_open<T: Element>(tape: &mut Tape<T>, x: Var) -> Var {
    let t = tape.tanh(x);
    tape.scale(t, 1.0 - OPEN_MARGIN)
}

pub(crate) fn sigmoid_open<T: Element>(tape: &mut Tape<T>, x: Var) -> Var {
    let s = tape.sigmoid(x);
    let s = tape.scale(s, 1.0 - OPEN_MARGIN);
    tape.add_scalar(s, OPEN_MARGIN / 2.0)
}

pub(crate) fn expect_shape(what: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::Dimension(format!("{what}: expected {want:?}, got {got:?}")));
    }
    Ok(())
}
