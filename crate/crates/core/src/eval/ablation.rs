use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{evaluate, report_table, EvalReport};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{LossReport, LossWeights};
use crate::nn::{init_params, ArchConfig, ModelBundle};
use crate::train::checkpoint;
use crate::train::{TrainConfig, Trainer};

/// Which terms of the integrated loss are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSetting {
    PixelOnly,
    ZOnly,
    PixelPlusZ,
    Integrated,
}

impl AblationSetting {
    pub const ALL: [AblationSetting; 4] = [
        AblationSetting::PixelOnly,
        AblationSetting::ZOnly,
        AblationSetting::PixelPlusZ,
        AblationSetting::Integrated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationSetting::PixelOnly => "pixel_only",
            AblationSetting::ZOnly => "z_only",
            AblationSetting::PixelPlusZ => "pixel_plus_z",
            AblationSetting::Integrated => "integrated",
        }
    }

    /// Zeroes the inactive λ of `base`.
    pub fn weights(self, base: &LossWeights) -> LossWeights {
        let (per, pix, z) = match self {
            AblationSetting::PixelOnly => (false, true, false),
            AblationSetting::ZOnly => (false, false, true),
            AblationSetting::PixelPlusZ => (false, true, true),
            AblationSetting::Integrated => (true, true, true),
        };
        let on = |flag: bool, v: f64| if flag { v } else { 0.0 };
        LossWeights {
            lambda_per: on(per, base.lambda_per),
            lambda_pix: on(pix, base.lambda_pix),
            lambda_z: on(z, base.lambda_z),
            ..base.clone()
        }
    }
}

/// Embedding used to score identity preservation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Judge {
    /// The model shared by all settings at the end of the warm-up, so every
    /// setting is scored under the same embedding.
    #[default]
    Warmup,
    /// Each setting's own discriminator.
    OwnModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub settings: Vec<AblationSetting>,
    pub judge: Judge,
    pub eval_seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            settings: AblationSetting::ALL.to_vec(),
            judge: Judge::Warmup,
            eval_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub reports: Vec<EvalReport>,
    /// CRC32 of the shared warm-up checkpoint every setting started from.
    pub start_checksum: u32,
    pub table: String,
    /// Trained models by setting name.
    #[serde(skip)]
    pub models: BTreeMap<String, ModelBundle>,
}

impl AblationOutcome {
    pub fn report(&self, setting: AblationSetting) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.setting == setting.name())
    }
}

/// Trains one model per setting and evaluates each on `test`.
///
/// All settings share initialization, data order and the stage-1 warm-up:
/// the warm-up runs once and every setting resumes from a byte-identical
/// snapshot of it, differing only in the loss weights.
pub fn run_ablation<D, E, F>(
    train: &D,
    test: &E,
    arch: &ArchConfig,
    base: &TrainConfig,
    cfg: &AblationConfig,
    mut on_report: F,
) -> Result<AblationOutcome>
where
    D: Dataset + ?Sized,
    E: Dataset + ?Sized,
    F: FnMut(AblationSetting, &LossReport) -> Result<()>,
{
    if cfg.settings.is_empty() {
        return Err(Error::Argument("no ablation settings selected".into()));
    }
    let bundle = init_params(arch, base.seed)?.with_attributes(train.attributes().to_vec())?;
    let mut warm = Trainer::new(bundle, base.clone())?;
    let bpe = warm.batches_per_epoch(train)?;
    let total = base.total_iterations(bpe);
    let warm_iters = (base.warmup_epochs * bpe).min(total);
    let first = cfg.settings[0];
    warm.run(train, warm_iters, |_, r| on_report(first, r))?;
    let snapshot = checkpoint::trainer_to_bytes(&warm, &BTreeMap::new())?;
    let start_checksum = crc32fast::hash(&snapshot);
    let judge_model = warm.bundle.clone();
    drop(warm);

    let mut reports = Vec::new();
    let mut models = BTreeMap::new();
    for &setting in &cfg.settings {
        let mut t = checkpoint::from_bytes(&snapshot)?.into_trainer()?;
        t.set_weights(setting.weights(&base.weights))?;
        t.run(train, total, |_, r| on_report(setting, r))?;
        let judge = match cfg.judge {
            Judge::Warmup => Some(&judge_model),
            Judge::OwnModel => None,
        };
        let mut report = evaluate(&t.bundle, judge, test, cfg.eval_seed)?;
        report.setting = setting.name().into();
        reports.push(report);
        models.insert(setting.name().to_string(), t.bundle);
    }
    let table = report_table(&reports);
    Ok(AblationOutcome {
        reports,
        start_checksum,
        table,
        models,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn setting_weights() {
        let base = LossWeights::default();
        let w = |s: AblationSetting| {
            let w = s.weights(&base);
            (w.lambda_per, w.lambda_pix, w.lambda_z)
        };
        assert_eq!(w(AblationSetting::PixelOnly), (0.0, 0.5, 0.0));
        assert_eq!(w(AblationSetting::ZOnly), (0.0, 0.0, 1.0));
        assert_eq!(w(AblationSetting::PixelPlusZ), (0.0, 0.5, 1.0));
        assert_eq!(w(AblationSetting::Integrated), (2.0, 0.5, 1.0));
    }
}
