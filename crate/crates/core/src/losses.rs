//! Loss terms of the training objective.
//!
//! `L = L_adv + L_label + L_inte` with
//! `L_inte = λ1·L_per + λ2·L_pix + λ3·L_z`. Every function records onto the
//! caller's tape and returns a scalar [`Var`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Probabilities are clamped at this floor before taking logs.
pub const LOG_EPS: f64 = 1e-7;

/// Distance used by the reconstruction terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    /// Mean squared error.
    #[default]
    Mse,
    /// Mean absolute error.
    Mae,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Perceptual term.
    pub lambda_per: f64,
    /// Per-pixel term.
    pub lambda_pix: f64,
    /// Latent-code term.
    pub lambda_z: f64,
    /// Per-layer weights of the perceptual term, one per discriminator stage.
    pub alpha: [f64; 4],
    #[serde(default)]
    pub norm: Norm,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_per: 2.0,
            lambda_pix: 0.5,
            lambda_z: 1.0,
            alpha: [1.0; 4],
            norm: Norm::Mse,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_per: f64, lambda_pix: f64, lambda_z: f64) -> Result<Self> {
        let w = LossWeights {
            lambda_per,
            lambda_pix,
            lambda_z,
            ..Default::default()
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_per, self.lambda_pix, self.lambda_z]
            .into_iter()
            .chain(self.alpha);
        for v in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Argument(format!(
                    "loss weights must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// `λ1·per + λ2·pix + λ3·z`.
    pub fn combine(&self, l_per: f64, l_pix: f64, l_z: f64) -> f64 {
        self.lambda_per * l_per + self.lambda_pix * l_pix + self.lambda_z * l_z
    }
}

/// Discriminator side of the adversarial loss:
/// `-mean(log s_real) - mean(log(1 - s_fake))`.
pub fn adv_loss_d<T: Element>(tape: &mut Tape<T>, s_real: Var, s_fake: Var) -> Result<Var> {
    let lr = tape.log_clamped(s_real, LOG_EPS);
    let real = tape.mean(lr);
    let inv = tape.one_minus(s_fake);
    let lf = tape.log_clamped(inv, LOG_EPS);
    let fake = tape.mean(lf);
    let sum = tape.add(real, fake)?;
    Ok(tape.scale(sum, -1.0))
}

/// Non-saturating generator loss `-mean(log s_fake)`.
pub fn adv_loss_g<T: Element>(tape: &mut Tape<T>, s_fake: Var) -> Var {
    let l = tape.log_clamped(s_fake, LOG_EPS);
    let m = tape.mean(l);
    tape.scale(m, -1.0)
}

/// Binary cross-entropy between predicted attribute probabilities and
/// `{0, 1}` targets, averaged over batch and attributes.
pub fn label_loss<T: Element>(tape: &mut Tape<T>, predicted: Var, target: &Tensor<T>) -> Result<Var> {
    if tape.shape(predicted) != target.shape() {
        return Err(Error::Dimension(format!(
            "label prediction {:?} vs target {:?}",
            tape.shape(predicted),
            target.shape()
        )));
    }
    if let Some(bad) = target
        .data()
        .iter()
        .find(|&&v| v != T::zero() && v != T::one())
    {
        return Err(Error::Argument(format!("attribute labels must be 0 or 1, found {bad}")));
    }
    let pos = tape.constant(target.clone());
    let neg = tape.constant(target.map(|v| T::one() - v));
    let lp = tape.log_clamped(predicted, LOG_EPS);
    let inv = tape.one_minus(predicted);
    let ln = tape.log_clamped(inv, LOG_EPS);
    let a = tape.mul(pos, lp)?;
    let b = tape.mul(neg, ln)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s);
    Ok(tape.scale(m, -1.0))
}

/// Mean distance between two equally shaped values.
pub fn distance<T: Element>(tape: &mut Tape<T>, a: Var, b: Var, norm: Norm) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let e = match norm {
        Norm::Mse => tape.square(d),
        Norm::Mae => tape.abs(d),
    };
    Ok(tape.mean(e))
}

pub fn pixel_loss<T: Element>(tape: &mut Tape<T>, real: Var, rebuilt: Var, norm: Norm) -> Result<Var> {
    distance(tape, real, rebuilt, norm)
}

pub fn latent_loss<T: Element>(tape: &mut Tape<T>, z_tilde: Var, z: Var, norm: Norm) -> Result<Var> {
    distance(tape, z_tilde, z, norm)
}

/// `Σ α_i · dist(h_rebuilt_i, h_i)`. The real maps are detached first, so
/// they act as a fixed target.
pub fn perceptual_loss<T: Element>(
    tape: &mut Tape<T>,
    real: &[Var],
    rebuilt: &[Var],
    alpha: &[f64],
    norm: Norm,
) -> Result<Var> {
    if real.len() != rebuilt.len() || real.len() != alpha.len() || real.is_empty() {
        return Err(Error::Dimension(format!(
            "perceptual loss over {} real maps, {} rebuilt maps and {} weights",
            real.len(),
            rebuilt.len(),
            alpha.len()
        )));
    }
    let mut total: Option<Var> = None;
    for ((&h, &hr), &a) in real.iter().zip(rebuilt).zip(alpha) {
        let target = tape.detach(h);
        let d = distance(tape, hr, target, norm)?;
        let term = tape.scale(d, a);
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// `λ1·l_per + λ2·l_pix + λ3·l_z` on the tape.
pub fn integrated_loss<T: Element>(
    tape: &mut Tape<T>,
    l_per: Var,
    l_pix: Var,
    l_z: Var,
    w: &LossWeights,
) -> Result<Var> {
    w.validate()?;
    let a = tape.scale(l_per, w.lambda_per);
    let b = tape.scale(l_pix, w.lambda_pix);
    let c = tape.scale(l_z, w.lambda_z);
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

/// Telemetry of one training iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: u64,
    pub epoch: u64,
    pub l_adv_d: f64,
    pub l_adv_g: f64,
    /// Label loss over the real and fake batches together.
    pub l_label: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_pix: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_per: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_z: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_inte: Option<f64>,
    /// `l_adv_d + l_label + l_inte`.
    pub total: f64,
    pub d_updates: u32,
    pub g_updates: u32,
}

impl LossReport {
    /// Checks `l_inte == λ1·l_per + λ2·l_pix + λ3·l_z` within `tol`.
    pub fn check_decomposition(&self, w: &LossWeights, tol: f64) -> Result<()> {
        match (self.l_inte, self.l_per, self.l_pix, self.l_z) {
            (None, None, None, None) => Ok(()),
            (Some(inte), Some(per), Some(pix), Some(z)) => {
                let want = w.combine(per, pix, z);
                if (inte - want).abs() <= tol {
                    Ok(())
                } else {
                    Err(Error::State(format!(
                        "iteration {}: l_inte {inte} differs from weighted sum {want}",
                        self.iteration
                    )))
                }
            }
            _ => Err(Error::State(format!(
                "iteration {}: partial integrated-loss entries",
                self.iteration
            ))),
        }
    }
}
