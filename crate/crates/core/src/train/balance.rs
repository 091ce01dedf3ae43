use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Discriminator,
    Generator,
}

/// Decides when one side of the adversarial game gets extra updates,
/// comparing exponential moving averages of the two adversarial losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Balancer {
    pub ratio: f64,
    pub max_extra: u32,
    pub decay: f64,
    pub ema_d: Option<f64>,
    pub ema_g: Option<f64>,
}

impl Balancer {
    pub fn new(ratio: f64, max_extra: u32, decay: f64) -> Self {
        Balancer {
            ratio,
            max_extra,
            decay,
            ema_d: None,
            ema_g: None,
        }
    }

    fn fold(decay: f64, ema: &mut Option<f64>, x: f64) {
        *ema = Some(match *ema {
            None => x,
            Some(e) => decay * e + (1.0 - decay) * x,
        });
    }

    pub fn observe(&mut self, l_adv_d: f64, l_adv_g: f64) {
        Self::fold(self.decay, &mut self.ema_d, l_adv_d);
        Self::fold(self.decay, &mut self.ema_g, l_adv_g);
    }

    /// The side that is currently losing by more than `ratio`, if any.
    pub fn lagging(&self) -> Option<Side> {
        let (d, g) = (self.ema_d?, self.ema_g?);
        if d > self.ratio * g {
            Some(Side::Discriminator)
        } else if g > self.ratio * d {
            Some(Side::Generator)
        } else {
            None
        }
    }

    /// Runs extra updates on the lagging side until it catches up or the
    /// cap is reached. `update` performs one update and returns that side's
    /// fresh adversarial loss. Returns the extra `(d, g)` update counts.
    pub fn rebalance(&mut self, mut update: impl FnMut(Side) -> Result<f64>) -> Result<(u32, u32)> {
        let Some(side) = self.lagging() else {
            return Ok((0, 0));
        };
        let mut n = 0;
        while n < self.max_extra && self.lagging() == Some(side) {
            let loss = update(side)?;
            match side {
                Side::Discriminator => Self::fold(self.decay, &mut self.ema_d, loss),
                Side::Generator => Self::fold(self.decay, &mut self.ema_g, loss),
            }
            n += 1;
        }
        Ok(match side {
            Side::Discriminator => (n, 0),
            Side::Generator => (0, n),
        })
    }
}
