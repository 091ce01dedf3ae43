use super::{adam_step, adam_step_masked, AdamHyper, Side, Trainer, ZPairing};
use crate::error::{Error, Result};
use crate::losses::{
    adv_loss_d, adv_loss_g, integrated_loss, label_loss, latent_loss, perceptual_loss, pixel_loss, LossReport,
};
use crate::nn::{Mode, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Losses measured during the ACGAN part of one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1Losses {
    pub l_adv_d: f64,
    pub l_adv_g: f64,
    /// Label loss over the real and fake halves together.
    pub l_label: f64,
    pub d_updates: u32,
    pub g_updates: u32,
}

/// Losses of one reconstruction pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage2Losses {
    pub l_per: f64,
    pub l_pix: f64,
    pub l_z: f64,
    pub l_inte: f64,
}

fn scalar(tape: &Tape<f32>, v: Var) -> f64 {
    tape.value(v).item() as f64
}

fn grads(tape: &mut Tape<f32>, vars: &[Var]) -> Vec<Option<Tensor>> {
    vars.iter().map(|&v| tape.take_grad(v)).collect()
}

fn mask_without(store: &ParamStore, prefix: &str) -> Vec<bool> {
    store.names().iter().map(|n| !n.starts_with(prefix)).collect()
}

impl Trainer {
    /// One full iteration on a batch: the ACGAN step with balancing, then
    /// the reconstruction pass once the warm-up is over.
    pub fn step(&mut self, x: &Tensor, c: &Tensor, epoch: u64) -> Result<LossReport> {
        let s1 = self.stage1_step(x, c)?;
        let s2 = if self.config.stage2_enabled && epoch >= self.config.warmup_epochs {
            Some(self.stage2_step(x, c)?)
        } else {
            None
        };
        let inte = s2.map(|s| s.l_inte);
        let report = LossReport {
            iteration: self.iteration,
            epoch,
            l_adv_d: s1.l_adv_d,
            l_adv_g: s1.l_adv_g,
            l_label: s1.l_label,
            l_pix: s2.map(|s| s.l_pix),
            l_per: s2.map(|s| s.l_per),
            l_z: s2.map(|s| s.l_z),
            l_inte: inte,
            total: s1.l_adv_d + s1.l_label + inte.unwrap_or(0.0),
            d_updates: s1.d_updates,
            g_updates: s1.g_updates,
        };
        let named = [
            ("l_adv_d", Some(report.l_adv_d)),
            ("l_adv_g", Some(report.l_adv_g)),
            ("l_label", Some(report.l_label)),
            ("l_pix", report.l_pix),
            ("l_per", report.l_per),
            ("l_z", report.l_z),
        ];
        for (name, v) in named {
            if v.is_some_and(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    iteration: self.iteration,
                    tensor: name.into(),
                });
            }
        }
        self.check_finite()?;
        report.check_decomposition(&self.config.weights, 1e-6)?;
        self.iteration += 1;
        Ok(report)
    }

    /// ACGAN updates: `D` on adversarial + real-label loss, `C` on the label
    /// loss over real and fake, `G` on adversarial + fake-label loss; then
    /// extra updates for whichever side is lagging.
    pub fn stage1_step(&mut self, x: &Tensor, c: &Tensor) -> Result<Stage1Losses> {
        let z = self.sample_z(x.rows());
        let (l_adv_d, l_label) = self.update_d(x, c, &z, true)?;
        let l_adv_g = self.update_g(c, &z)?;
        let mut balancer = self.balancer.clone();
        balancer.observe(l_adv_d, l_adv_g);
        let (extra_d, extra_g) = balancer.rebalance(|side| match side {
            Side::Discriminator => self.update_d(x, c, &z, false).map(|(l, _)| l),
            Side::Generator => self.update_g(c, &z),
        })?;
        self.balancer = balancer;
        Ok(Stage1Losses {
            l_adv_d,
            l_adv_g,
            l_label,
            d_updates: 1 + extra_d,
            g_updates: 1 + extra_g,
        })
    }

    /// Returns the adversarial and label losses seen before the update.
    fn update_d(&mut self, x: &Tensor, c: &Tensor, z: &Tensor, with_classifier: bool) -> Result<(f64, f64)> {
        let arch = self.bundle.arch.clone();
        let (g, d, cl) = (
            &self.bundle.generator,
            &self.bundle.discriminator,
            &self.bundle.classifier,
        );
        let mut tape = Tape::new();
        let gp = g.params.bind(&mut tape, false);
        let dp = d.params.bind(&mut tape, true);
        let cp = cl.params.bind(&mut tape, with_classifier);
        let zv = tape.constant(z.clone());
        let cv = tape.constant(c.clone());
        let xv = tape.constant(x.clone());
        let (fake, _) = g.forward(&arch, &mut tape, &gp, zv, cv, Mode::Train)?;
        let (dr, stats) = d.forward(&arch, &mut tape, &dp, xv, Mode::Train)?;
        let (df, _) = d.forward(&arch, &mut tape, &dp, fake, Mode::Train)?;
        let cr = cl.forward(&mut tape, &cp, dr.shared)?;
        let cf = cl.forward(&mut tape, &cp, df.shared)?;
        let l_adv = adv_loss_d(&mut tape, dr.source, df.source)?;
        let l_real = label_loss(&mut tape, cr.c, c)?;
        let l_fake = label_loss(&mut tape, cf.c, c)?;
        let both = tape.add(l_real, l_fake)?;
        let l_label = tape.scale(both, 0.5);
        let loss_d = tape.add(l_adv, l_real)?;
        tape.backward_wrt(loss_d, &dp)?;
        let gd = grads(&mut tape, &dp);
        let gc = if with_classifier {
            tape.backward_wrt(l_label, &cp)?;
            Some(grads(&mut tape, &cp))
        } else {
            None
        };
        let hp = self.config.adam();
        adam_step(&mut self.bundle.discriminator.params, &gd, &mut self.opt.d, &hp)?;
        if let Some(gc) = gc {
            let mask = mask_without(&self.bundle.classifier.params, "c.z.");
            adam_step_masked(&mut self.bundle.classifier.params, &gc, &mask, &mut self.opt.c, &hp)?;
        }
        self.bundle.discriminator.apply_stats(&stats);
        Ok((scalar(&tape, l_adv), scalar(&tape, l_label)))
    }

    /// Returns the generator's adversarial loss seen before the update.
    fn update_g(&mut self, c: &Tensor, z: &Tensor) -> Result<f64> {
        let arch = self.bundle.arch.clone();
        let (g, d, cl) = (
            &self.bundle.generator,
            &self.bundle.discriminator,
            &self.bundle.classifier,
        );
        let mut tape = Tape::new();
        let gp = g.params.bind(&mut tape, true);
        let dp = d.params.bind(&mut tape, false);
        let cp = cl.params.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let cv = tape.constant(c.clone());
        let (fake, stats) = g.forward(&arch, &mut tape, &gp, zv, cv, Mode::Train)?;
        let (df, _) = d.forward(&arch, &mut tape, &dp, fake, Mode::Train)?;
        let cf = cl.forward(&mut tape, &cp, df.shared)?;
        let l_adv = adv_loss_g(&mut tape, df.source);
        let l_label = label_loss(&mut tape, cf.c, c)?;
        let loss = tape.add(l_adv, l_label)?;
        tape.backward_wrt(loss, &gp)?;
        let gg = grads(&mut tape, &gp);
        adam_step(&mut self.bundle.generator.params, &gg, &mut self.opt.g, &self.config.adam())?;
        self.bundle.generator.apply_stats(&stats);
        Ok(scalar(&tape, l_adv))
    }

    /// Reconstruction pass `x → D → C → (z̃, c̃) → G → x_rebuilt → D` under
    /// the integrated loss. `G` steps at the full rate; `D` and `C`, when
    /// `inte_updates_dc` is set, at `inte_dc_scale` times it.
    pub fn stage2_step(&mut self, x: &Tensor, c: &Tensor) -> Result<Stage2Losses> {
        let arch = self.bundle.arch.clone();
        let cfg = self.config.clone();
        let z_fresh = match cfg.z_pairing {
            ZPairing::Sampled => Some(self.sample_z(x.rows())),
            ZPairing::Rebuild => None,
        };
        let (g, d, cl) = (
            &self.bundle.generator,
            &self.bundle.discriminator,
            &self.bundle.classifier,
        );
        let mut tape = Tape::new();
        let gp = g.params.bind(&mut tape, true);
        let dp = d.params.bind(&mut tape, cfg.inte_updates_dc);
        let cp = cl.params.bind(&mut tape, cfg.inte_updates_dc);
        let xv = tape.constant(x.clone());
        let (dr, _) = d.forward(&arch, &mut tape, &dp, xv, Mode::Train)?;
        let enc = cl.forward(&mut tape, &cp, dr.shared)?;
        let (rebuilt, _) = g.forward(&arch, &mut tape, &gp, enc.z, enc.c, Mode::Train)?;
        let (drb, _) = d.forward(&arch, &mut tape, &dp, rebuilt, Mode::Train)?;
        let w = &cfg.weights;
        let l_per = perceptual_loss(&mut tape, &dr.hidden, &drb.hidden, &w.alpha, w.norm)?;
        let l_pix = pixel_loss(&mut tape, xv, rebuilt, w.norm)?;
        let l_z = match z_fresh {
            Some(z) => {
                let zv = tape.constant(z);
                let cv = tape.constant(c.clone());
                let (fake, _) = g.forward(&arch, &mut tape, &gp, zv, cv, Mode::Train)?;
                let (df, _) = d.forward(&arch, &mut tape, &dp, fake, Mode::Train)?;
                let ef = cl.forward(&mut tape, &cp, df.shared)?;
                latent_loss(&mut tape, ef.z, zv, w.norm)?
            }
            None => {
                let eb = cl.forward(&mut tape, &cp, drb.shared)?;
                latent_loss(&mut tape, eb.z, enc.z, w.norm)?
            }
        };
        let l_inte = integrated_loss(&mut tape, l_per, l_pix, l_z, w)?;
        tape.backward(l_inte)?;
        let hp = cfg.adam();
        let gg = grads(&mut tape, &gp);
        adam_step(&mut self.bundle.generator.params, &gg, &mut self.opt.g_inte, &hp)?;
        if cfg.inte_updates_dc {
            let hp_dc = AdamHyper {
                lr: hp.lr * cfg.inte_dc_scale,
                ..hp
            };
            let gd = grads(&mut tape, &dp);
            let gc = grads(&mut tape, &cp);
            let mask = mask_without(&self.bundle.discriminator.params, "d.source.");
            adam_step_masked(&mut self.bundle.discriminator.params, &gd, &mask, &mut self.opt.d_inte, &hp_dc)?;
            adam_step(&mut self.bundle.classifier.params, &gc, &mut self.opt.c_inte, &hp_dc)?;
        }
        let (per, pix, lz) = (scalar(&tape, l_per), scalar(&tape, l_pix), scalar(&tape, l_z));
        Ok(Stage2Losses {
            l_per: per,
            l_pix: pix,
            l_z: lz,
            l_inte: w.combine(per, pix, lz),
        })
    }
}
