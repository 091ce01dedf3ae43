use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use itgan_core::data::{split_indices, CelebaDataset, Dataset, SyntheticSpec};
use itgan_core::nn::ArchConfig;
use itgan_core::train::TrainConfig;

use crate::Usage;

/// Where training and evaluation images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: bool,
    /// Training sprites generated in synthetic mode.
    pub synthetic_count: usize,
    /// Held-out sprites, drawn from indices disjoint from the training ones.
    pub synthetic_test_count: usize,
    pub data_dir: Option<PathBuf>,
    pub attrs_file: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synthetic: false,
            synthetic_count: 2048,
            synthetic_test_count: 256,
            data_dir: None,
            attrs_file: None,
        }
    }
}

/// First index of the held-out synthetic range.
const SYNTHETIC_TEST_START: u64 = 1 << 40;

/// The file read by `--config`; flags override its values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// Flags shared by every subcommand that trains or reads a dataset.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct RunFlags {
    /// JSON file with `arch`, `train` and `data` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Use generated sprites instead of CelebA.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub attrs_file: Option<PathBuf>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub width_multiplier: Option<f64>,
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    /// Accepted for explicitness; training is always deterministic.
    #[arg(long)]
    pub deterministic: bool,
}

impl RunFlags {
    /// Defaults, then the synthetic preset, then the file, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let value: serde_json::Value =
                    serde_json::from_str(&text).map_err(|e| Usage(format!("{}: {e}", path.display())))?;
                let synthetic = self.synthetic || value.pointer("/data/synthetic").and_then(|v| v.as_bool()) == Some(true);
                let mut base = serde_json::to_value(RunConfig::preset(synthetic))?;
                merge(&mut base, value);
                serde_json::from_value(base).map_err(|e| Usage(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::preset(self.synthetic),
        };
        let (a, t, d) = (&mut cfg.arch, &mut cfg.train, &mut cfg.data);
        d.synthetic |= self.synthetic;
        if let Some(p) = &self.data_dir {
            d.data_dir = Some(p.clone());
        }
        if let Some(p) = &self.attrs_file {
            d.attrs_file = Some(p.clone());
        }
        if let Some(v) = self.image_size {
            a.image_size = v;
        }
        if let Some(v) = self.width_multiplier {
            a.width_multiplier = v;
        }
        if let Some(v) = self.iters {
            t.iters = Some(v);
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
            if self.iters.is_none() {
                t.iters = None;
            }
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        t.deterministic |= self.deterministic;
        if d.synthetic {
            a.attr_count = SyntheticSpec::attributes().len();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut serde_json::Value, top: serde_json::Value) {
    match (base, top) {
        (serde_json::Value::Object(b), serde_json::Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Synthetic runs default to a desk-scale model.
    pub fn preset(synthetic: bool) -> Self {
        let mut cfg = RunConfig::default();
        if synthetic {
            cfg.data.synthetic = true;
            cfg.arch = ArchConfig {
                image_size: 32,
                attr_count: SyntheticSpec::attributes().len(),
                width_multiplier: 0.25,
                ..ArchConfig::default()
            };
        } else {
            cfg.arch.attr_count = itgan_core::data::CELEBA_ATTRIBUTE_COUNT;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate().map_err(|e| Usage(e.to_string()))?;
        self.train.validate().map_err(|e| Usage(e.to_string()))?;
        let d = &self.data;
        if !d.synthetic && (d.data_dir.is_none() || d.attrs_file.is_none()) {
            return Err(Usage("pass --synthetic, or both --data-dir and --attrs-file".into()).into());
        }
        if d.synthetic && d.synthetic_count == 0 {
            return Err(Usage("synthetic_count must be positive".into()).into());
        }
        Ok(())
    }

    /// Training and held-out sets.
    pub fn datasets(&self) -> Result<(Box<dyn Dataset>, Box<dyn Dataset>)> {
        let s = self.arch.image_size;
        let d = &self.data;
        if d.synthetic {
            let spec = SyntheticSpec::new(s, self.train.seed);
            let train = spec.generate(d.synthetic_count)?;
            let test = spec.generate_range(SYNTHETIC_TEST_START, d.synthetic_test_count.max(1))?;
            return Ok((Box::new(train), Box::new(test)));
        }
        let (dir, attrs) = (d.data_dir.as_deref().expect("validated"), d.attrs_file.as_deref().expect("validated"));
        let all = CelebaDataset::open(dir, attrs, s)?;
        if all.missing() > 0 {
            tracing::warn!("{} listed images are missing from {}", all.missing(), dir.display());
        }
        let (train, test) = split_indices(all.len(), self.train.seed)?;
        Ok((Box::new(all.subset(&train)?), Box::new(all.subset(&test)?)))
    }

    /// Held-out set only.
    pub fn test_set(&self) -> Result<Box<dyn Dataset>> {
        if self.data.synthetic {
            let spec = SyntheticSpec::new(self.arch.image_size, self.train.seed);
            return Ok(Box::new(
                spec.generate_range(SYNTHETIC_TEST_START, self.data.synthetic_test_count.max(1))?,
            ));
        }
        Ok(self.datasets()?.1)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
