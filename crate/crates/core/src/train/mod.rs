//! Two-stage training: ACGAN updates followed by a reconstruction pass
//! under the integrated loss, with Adam and D/G update balancing.

mod adam;
mod balance;
pub mod checkpoint;
mod steps;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_order, Dataset};
use crate::error::{Error, Result};
use crate::losses::{LossReport, LossWeights};
use crate::nn::{ModelBundle, ParamStore};
use crate::tensor::Tensor;

pub use adam::{adam_step, adam_step_masked, AdamHyper, AdamState, ADAM_EPS};
pub use balance::{Balancer, Side};

/// Which latent pair the latent-code loss compares in the reconstruction
/// pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZPairing {
    /// A fresh `z ~ U(-1, 1)` against `C(D(G(z, c))).z`.
    #[default]
    Sampled,
    /// `z̃` of the real image against `z̃` of its reconstruction.
    Rebuild,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: u64,
    /// Total iterations; overrides `epochs` when set.
    pub iters: Option<u64>,
    /// `ρ`: a side gets extra updates when its loss average exceeds `ρ` times
    /// the other's.
    pub balance_ratio: f64,
    pub max_extra_updates: u32,
    /// Decay of the loss moving averages used for balancing.
    pub ema_decay: f64,
    pub stage2_enabled: bool,
    /// Epochs of ACGAN-only training before the reconstruction pass starts.
    pub warmup_epochs: u64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Whether the integrated loss also updates `D` and `C`.
    pub inte_updates_dc: bool,
    /// Step size of the integrated-loss `D`/`C` updates relative to `lr`.
    pub inte_dc_scale: f64,
    pub z_pairing: ZPairing,
    /// Training is single-threaded with a fixed operation order, so runs
    /// are always reproducible; the flag is recorded for provenance.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 64,
            epochs: 50,
            iters: None,
            balance_ratio: 2.0,
            max_extra_updates: 3,
            ema_decay: 0.9,
            stage2_enabled: true,
            warmup_epochs: 1,
            seed: 0,
            weights: LossWeights::default(),
            inte_updates_dc: true,
            inte_dc_scale: 0.1,
            z_pairing: ZPairing::Sampled,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.balance_ratio.is_nan() || self.balance_ratio < 1.0 {
            return bad(format!("balance_ratio must be at least 1, got {}", self.balance_ratio));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay));
        }
        if !(self.inte_dc_scale >= 0.0 && self.inte_dc_scale.is_finite()) {
            return bad(format!("inte_dc_scale must be non-negative, got {}", self.inte_dc_scale));
        }
        if self.iters.is_none() && self.epochs == 0 {
            return bad("either epochs or iters must be positive".into());
        }
        self.weights.validate()
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
        }
    }

    /// Iterations a run performs given the number of batches per epoch.
    pub fn total_iterations(&self, batches_per_epoch: u64) -> u64 {
        self.iters.unwrap_or(self.epochs * batches_per_epoch)
    }
}

/// Optimizer state of all three networks, with separate moments for the
/// integrated-loss updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers {
    pub g: AdamState,
    pub d: AdamState,
    pub c: AdamState,
    pub g_inte: AdamState,
    pub d_inte: AdamState,
    pub c_inte: AdamState,
}

impl Optimizers {
    pub fn new(bundle: &ModelBundle) -> Self {
        Optimizers {
            g: AdamState::new(&bundle.generator.params),
            d: AdamState::new(&bundle.discriminator.params),
            c: AdamState::new(&bundle.classifier.params),
            g_inte: AdamState::new(&bundle.generator.params),
            d_inte: AdamState::new(&bundle.discriminator.params),
            c_inte: AdamState::new(&bundle.classifier.params),
        }
    }
}

/// Serializable position of the noise generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal string; JSON numbers cannot carry 128 bits.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Format(format!("bad rng word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Stream of the training noise generator; initialization uses stream 0.
const NOISE_STREAM: u64 = 1;

pub struct Trainer {
    pub bundle: ModelBundle,
    config: TrainConfig,
    opt: Optimizers,
    rng: ChaCha8Rng,
    balancer: Balancer,
    iteration: u64,
}

impl Trainer {
    pub fn new(bundle: ModelBundle, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(NOISE_STREAM);
        Ok(Trainer {
            opt: Optimizers::new(&bundle),
            balancer: Balancer::new(config.balance_ratio, config.max_extra_updates, config.ema_decay),
            bundle,
            config,
            rng,
            iteration: 0,
        })
    }

    pub(crate) fn from_parts(
        bundle: ModelBundle,
        config: TrainConfig,
        opt: Optimizers,
        rng: ChaCha8Rng,
        balancer: Balancer,
        iteration: u64,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            bundle,
            config,
            opt,
            rng,
            balancer,
            iteration,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Replaces the loss weights, keeping all other state.
    pub fn set_weights(&mut self, weights: LossWeights) -> Result<()> {
        weights.validate()?;
        self.config.weights = weights;
        Ok(())
    }

    /// Changes the run length, e.g. to extend a resumed run.
    pub fn set_schedule(&mut self, iters: Option<u64>, epochs: u64) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.iters = iters;
        cfg.epochs = epochs;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    /// Completed iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn optimizers(&self) -> &Optimizers {
        &self.opt
    }

    pub fn balancer(&self) -> &Balancer {
        &self.balancer
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    /// Iterations per epoch on `data`.
    pub fn batches_per_epoch<D: Dataset + ?Sized>(&self, data: &D) -> Result<u64> {
        if data.len() < self.config.batch_size {
            return Err(Error::Argument(format!(
                "dataset of {} images is smaller than one batch of {}",
                data.len(),
                self.config.batch_size
            )));
        }
        Ok((data.len() / self.config.batch_size) as u64)
    }

    /// Trains until `until` iterations are complete, calling `on_report`
    /// after each one. Batch order depends only on the seed and the
    /// iteration index, so resuming mid-epoch continues the same sequence.
    pub fn run<D, F>(&mut self, data: &D, until: u64, mut on_report: F) -> Result<()>
    where
        D: Dataset + ?Sized,
        F: FnMut(&Trainer, &LossReport) -> Result<()>,
    {
        if data.attributes().len() != self.bundle.arch.attr_count || data.image_size() != self.bundle.arch.image_size {
            return Err(Error::Dimension(format!(
                "dataset has {} attributes at {}px, model expects {} at {}px",
                data.attributes().len(),
                data.image_size(),
                self.bundle.arch.attr_count,
                self.bundle.arch.image_size
            )));
        }
        let bpe = self.batches_per_epoch(data)?;
        let mut cached: Option<(u64, Vec<Vec<usize>>)> = None;
        while self.iteration < until {
            let epoch = self.iteration / bpe;
            if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                cached = Some((epoch, batch_order(data.len(), self.config.batch_size, self.config.seed, epoch)?));
            }
            let order = &cached.as_ref().expect("order cached").1;
            let (x, c) = data.batch(&order[(self.iteration % bpe) as usize])?;
            let report = self.step(&x, &c, epoch)?;
            on_report(self, &report)?;
        }
        Ok(())
    }

    /// Runs the whole configured schedule on `data`.
    pub fn fit<D, F>(&mut self, data: &D, on_report: F) -> Result<()>
    where
        D: Dataset + ?Sized,
        F: FnMut(&Trainer, &LossReport) -> Result<()>,
    {
        let total = self.config.total_iterations(self.batches_per_epoch(data)?);
        self.run(data, total, on_report)
    }

    fn check_finite(&self) -> Result<()> {
        let stores: [&ParamStore; 3] = [
            &self.bundle.generator.params,
            &self.bundle.discriminator.params,
            &self.bundle.classifier.params,
        ];
        for store in stores {
            for (name, t) in store.iter() {
                if !t.is_finite() {
                    return Err(Error::NonFinite {
                        iteration: self.iteration,
                        tensor: name.to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    fn sample_z(&mut self, b: usize) -> Tensor {
        Tensor::uniform(&[b, self.bundle.arch.z_dim], -1.0, 1.0, &mut self.rng)
    }
}
