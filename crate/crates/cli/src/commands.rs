use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use itgan_core::data::SyntheticSpec;
use itgan_core::eval::{self, identity_scores, run_ablation, AblationConfig, Judge};
use itgan_core::losses::LossReport;
use itgan_core::nn::{init_params, ModelBundle};
use itgan_core::pipeline::{self, Edit, GRID_COLUMNS};
use itgan_core::train::{checkpoint, Trainer};
use itgan_core::Tensor;

use crate::config::{write_json, RunConfig, RunFlags};
use crate::Usage;

/// Images in each training sample grid.
const SAMPLE_COUNT: usize = 16;

fn load_bundle(path: &Path) -> Result<(ModelBundle, Option<u64>)> {
    let ck = checkpoint::load(path)?;
    let seed = ck.train_config().map(|c| c.seed);
    Ok((ck.bundle, seed))
}

/// Data settings for a command that works on an existing model.
fn data_for(flags: &RunFlags, bundle: &ModelBundle, train_seed: Option<u64>) -> Result<RunConfig> {
    let mut f = flags.clone();
    f.image_size = Some(bundle.arch.image_size);
    f.width_multiplier = Some(bundle.arch.width_multiplier);
    if f.seed.is_none() {
        f.seed = train_seed;
    }
    let mut cfg = f.resolve()?;
    cfg.arch = bundle.arch.clone();
    Ok(cfg)
}

/// JSON-lines loss log.
struct LossLog {
    path: PathBuf,
    w: BufWriter<File>,
}

impl LossLog {
    fn open(path: PathBuf, append: bool) -> itgan_core::Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| itgan_core::Error::io(&path, e))?;
        Ok(LossLog {
            w: BufWriter::new(file),
            path,
        })
    }

    fn write(&mut self, r: &LossReport) -> itgan_core::Result<()> {
        let line = serde_json::to_string(r).map_err(|e| itgan_core::Error::io(&self.path, e.into()))?;
        writeln!(self.w, "{line}").map_err(|e| itgan_core::Error::io(&self.path, e))
    }

    fn flush(&mut self) -> itgan_core::Result<()> {
        self.w.flush().map_err(|e| itgan_core::Error::io(&self.path, e))
    }
}

fn sample_grid(bundle: &ModelBundle, z: &Tensor<f32>, c: &Tensor<f32>, path: &Path) -> itgan_core::Result<()> {
    let images = bundle.generate(z, c)?;
    pipeline::write_png(&pipeline::grid(&images, GRID_COLUMNS)?, path)
}

fn echo_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("config.json"), cfg)?;
    println!("{}", serde_json::to_string_pretty(cfg)?);
    Ok(())
}

pub fn train(flags: &RunFlags, out: &Path, resume: Option<&Path>, sample_every: u64, save_every: Option<u64>) -> Result<()> {
    let mut cfg = flags.resolve()?;
    let mut trainer = match resume {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            if !ck.has_trainer_state() {
                return Err(Usage(format!("{} holds no trainer state to resume", path.display())).into());
            }
            let mut t = ck.into_trainer()?;
            if flags.iters.is_some() || flags.epochs.is_some() {
                t.set_schedule(cfg.train.iters, cfg.train.epochs)?;
            }
            cfg.arch = t.bundle.arch.clone();
            cfg.train = t.config().clone();
            t
        }
        None => {
            let names = if cfg.data.synthetic { SyntheticSpec::attributes() } else { Vec::new() };
            let mut bundle = init_params(&cfg.arch, cfg.train.seed)?;
            if !names.is_empty() {
                bundle = bundle.with_attributes(names)?;
            }
            Trainer::new(bundle, cfg.train.clone())?
        }
    };
    let (train_set, test_set) = cfg.datasets()?;
    if resume.is_none() {
        trainer.bundle = trainer.bundle.clone().with_attributes(train_set.attributes().to_vec())?;
    }
    echo_config(&cfg, out)?;
    let samples = out.join("samples");
    std::fs::create_dir_all(&samples).with_context(|| format!("creating {}", samples.display()))?;
    let mut log = LossLog::open(out.join("losses.jsonl"), resume.is_some())?;

    let bpe = trainer.batches_per_epoch(&*train_set)?;
    let total = cfg.train.total_iterations(bpe);
    let n = SAMPLE_COUNT.min(test_set.len());
    let (_, sample_c) = test_set.batch(&(0..n).collect::<Vec<_>>())?;
    let sample_z = pipeline::latents(n, cfg.arch.z_dim, cfg.train.seed);
    let ck_path = out.join("checkpoint.itgan");
    let meta = BTreeMap::new();
    tracing::info!(
        "training {} parameters for {total} iterations ({bpe} per epoch)",
        trainer.bundle.param_count()
    );

    trainer.run(&*train_set, total, |t, r| {
        log.write(r)?;
        let done = r.iteration + 1;
        if done % 50 == 0 || done == total {
            tracing::info!(
                "iter {done}/{total} adv_d {:.4} adv_g {:.4} label {:.4} inte {}",
                r.l_adv_d,
                r.l_adv_g,
                r.l_label,
                r.l_inte.map_or("-".into(), |v| format!("{v:.4}"))
            );
        }
        if sample_every > 0 && done % sample_every == 0 {
            sample_grid(&t.bundle, &sample_z, &sample_c, &samples.join(format!("iter_{done:07}.png")))?;
        }
        if save_every.is_some_and(|k| k > 0 && done % k == 0) {
            checkpoint::save_trainer(t, &meta, &ck_path)?;
        }
        Ok(())
    })?;
    log.flush()?;
    checkpoint::save_trainer(&trainer, &meta, &ck_path)?;
    sample_grid(&trainer.bundle, &sample_z, &sample_c, &samples.join("final.png"))?;
    eprintln!("wrote {} after {} iterations", ck_path.display(), trainer.iteration());
    Ok(())
}

pub fn rebuild(ck: &Path, inputs: &[PathBuf], flags: &RunFlags, count: usize, out: &Path) -> Result<()> {
    let (bundle, seed) = load_bundle(ck)?;
    let s = bundle.image_size();
    let x = if inputs.is_empty() {
        let test = data_for(flags, &bundle, seed)?.test_set()?;
        let n = count.min(test.len()).max(1);
        test.batch(&(0..n).collect::<Vec<_>>())?.0
    } else {
        let images = inputs
            .iter()
            .map(|p| pipeline::load_image(p, s))
            .collect::<itgan_core::Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<f32>> = images.iter().collect();
        Tensor::stack_rows(&refs)?.reshape(&[images.len(), 3, s, s])?
    };
    let rebuilt = bundle.rebuild(&x)?;
    let scores = identity_scores(&bundle, &x, &rebuilt)?;
    let mut rows = Vec::new();
    for start in (0..x.rows()).step_by(GRID_COLUMNS) {
        let end = (start + GRID_COLUMNS).min(x.rows());
        for src in [&x, &rebuilt] {
            for i in start..end {
                rows.push(src.row(i)?);
            }
            for _ in end..start + GRID_COLUMNS {
                rows.push(Tensor::full(&[1, 3, s, s], -1.0));
            }
        }
    }
    let refs: Vec<&Tensor<f32>> = rows.iter().collect();
    let sheet = Tensor::stack_rows(&refs)?.reshape(&[rows.len(), 3, s, s])?;
    pipeline::write_png(&pipeline::grid(&sheet, GRID_COLUMNS)?, out)?;
    for (i, v) in scores.iter().enumerate() {
        println!("image {i}: identity {v:.6}");
    }
    println!("identity: {}", eval::IDENTITY_METRIC);
    eprintln!("wrote {}", out.display());
    Ok(())
}

pub fn generate(ck: &Path, assignment: &[Edit], count: usize, seed: u64, out: &Path) -> Result<()> {
    let (bundle, _) = load_bundle(ck)?;
    let c = pipeline::assignment(&bundle, assignment)?;
    let images = pipeline::generate(&bundle, &c, count, seed)?;
    pipeline::write_png(&pipeline::grid(&images, GRID_COLUMNS)?, out)?;
    let echo: BTreeMap<&str, f32> = bundle.attributes.iter().map(String::as_str).zip(c.iter().copied()).collect();
    println!("{}", serde_json::to_string(&serde_json::json!({ "c": echo, "count": count, "seed": seed }))?);
    eprintln!("wrote {}", out.display());
    Ok(())
}

pub fn transform(ck: &Path, input: &Path, edits: &[Edit], out: &Path) -> Result<()> {
    let (bundle, _) = load_bundle(ck)?;
    let x = pipeline::load_image(input, bundle.image_size())?;
    let t = pipeline::transform(&bundle, &x, edits)?;
    if let Some(w) = &t.warning {
        eprintln!("warning: {w}");
    }
    pipeline::write_png(&pipeline::tensor_to_raw(&t.image)?, out)?;
    let named = |v: &[f32]| -> BTreeMap<String, f32> { bundle.attributes.iter().cloned().zip(v.iter().copied()).collect() };
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "edits": edits.iter().map(ToString::to_string).collect::<Vec<_>>(),
            "c_tilde": named(&t.c_tilde),
            "c_edited": named(&t.c_edited),
            "identity_score": t.identity_score,
            "identity_metric": eval::IDENTITY_METRIC,
        }))?
    );
    eprintln!("wrote {}", out.display());
    Ok(())
}

pub fn evaluate(ck: &Path, flags: &RunFlags, out: &Path) -> Result<()> {
    let (bundle, seed) = load_bundle(ck)?;
    let cfg = data_for(flags, &bundle, seed)?;
    let test = cfg.test_set()?;
    let report = eval::evaluate(&bundle, None, &*test, cfg.train.seed)?;
    write_json(out, &report)?;
    print!("{}", eval::report_table(std::slice::from_ref(&report)));
    Ok(())
}

pub fn ablate(flags: &RunFlags, out: &Path, judge: Judge) -> Result<()> {
    let cfg = flags.resolve()?;
    echo_config(&cfg, out)?;
    let (train_set, test_set) = cfg.datasets()?;
    let ab = AblationConfig {
        judge,
        eval_seed: cfg.train.seed,
        ..AblationConfig::default()
    };
    let mut logs: BTreeMap<&'static str, LossLog> = BTreeMap::new();
    for s in &ab.settings {
        logs.insert(s.name(), LossLog::open(out.join(format!("losses_{}.jsonl", s.name())), false)?);
    }
    let outcome = run_ablation(&*train_set, &*test_set, &cfg.arch, &cfg.train, &ab, |setting, r| {
        let log = logs.get_mut(setting.name()).expect("one log per setting");
        log.write(r)?;
        if (r.iteration + 1) % 100 == 0 {
            tracing::info!("{} iter {}", setting.name(), r.iteration + 1);
        }
        Ok(())
    })?;
    for log in logs.values_mut() {
        log.flush()?;
    }
    write_json(&out.join("ablation.json"), &outcome)?;
    std::fs::write(out.join("table.txt"), &outcome.table)?;

    let n = GRID_COLUMNS.min(test_set.len());
    let (x, _) = test_set.batch(&(0..n).collect::<Vec<_>>())?;
    let mut rows: Vec<Tensor<f32>> = (0..n).map(|i| x.row(i)).collect::<itgan_core::Result<_>>()?;
    for s in &ab.settings {
        let rebuilt = outcome.models[s.name()].rebuild(&x)?;
        for i in 0..n {
            rows.push(rebuilt.row(i)?);
        }
    }
    let sz = cfg.arch.image_size;
    let refs: Vec<&Tensor<f32>> = rows.iter().collect();
    let sheet = Tensor::stack_rows(&refs)?.reshape(&[rows.len(), 3, sz, sz])?;
    pipeline::write_png(&pipeline::grid(&sheet, n)?, &out.join("rebuilds.png"))?;
    print!("{}", outcome.table);
    Ok(())
}

pub fn serve(ck: Option<&Path>, bind: IpAddr, port: u16, origins: Vec<String>) -> Result<()> {
    let bundle = match ck {
        Some(p) => Some(load_bundle(p)?.0),
        None => None,
    };
    let origins = itgan_service::CorsOrigins((!origins.is_empty()).then_some(origins));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(itgan_service::serve(bundle, SocketAddr::new(bind, port), origins))?;
    Ok(())
}
