//! Multi-label recognition, reconstruction and identity metrics, and the
//! loss-ablation harness.
//!
//! The identity score is the cosine distance between discriminator shared
//! embeddings. It stands in for an external face-recognition embedding, so
//! only orderings between settings are meaningful, never absolute values.

mod ablation;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::ModelBundle;
use crate::tensor::Tensor;

pub use ablation::{run_ablation, AblationConfig, AblationOutcome, AblationSetting, Judge};

/// Label written next to every identity score.
pub const IDENTITY_METRIC: &str = "discriminator-embedding cosine distance (face-recognition substitute)";

/// Images per forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

/// Fraction of `(sample, attribute)` pairs where `pred > threshold`
/// disagrees with `truth`.
pub fn hamming_loss(pred: &Tensor<f32>, truth: &Tensor<f32>, threshold: f64) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::Dimension(format!(
            "predictions {:?} vs labels {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let wrong = pred
        .data()
        .iter()
        .zip(truth.data())
        .filter(|(&p, &t)| (p as f64 > threshold) != (t > 0.5))
        .count();
    Ok(wrong as f64 / pred.numel() as f64)
}

/// `1 - cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("embeddings of length {} and {}", a.len(), b.len())));
    }
    let (mut ab, mut aa, mut bb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::DegenerateEmbedding("an embedding has zero norm".into()));
    }
    Ok((1.0 - ab / (aa.sqrt() * bb.sqrt())).clamp(0.0, 2.0))
}

fn as_batch(x: &Tensor<f32>) -> Result<Tensor<f32>> {
    match x.shape().len() {
        3 => x.clone().reshape(&[1, x.shape()[0], x.shape()[1], x.shape()[2]]),
        4 => Ok(x.clone()),
        _ => Err(Error::Dimension(format!("expected an image or image batch, got {:?}", x.shape()))),
    }
}

/// Shared embeddings of a batch in eval mode, `[B, 1024]`.
pub fn embed(bundle: &ModelBundle, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    Ok(bundle.inspect(&as_batch(x)?)?.shared)
}

/// Identity score between two images (`[3, S, S]` each).
pub fn identity_score(bundle: &ModelBundle, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let scores = identity_scores(bundle, &as_batch(a)?, &as_batch(b)?)?;
    Ok(scores[0])
}

/// Row-wise identity scores between two equally sized batches.
pub fn identity_scores(bundle: &ModelBundle, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Vec<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("image batches {:?} vs {:?}", a.shape(), b.shape())));
    }
    let both = Tensor::stack_rows(&[a, b])?;
    let e = embed(bundle, &both)?;
    let n = a.rows();
    let w = e.numel() / e.rows();
    let d = e.data();
    (0..n)
        .map(|i| cosine_distance(&d[i * w..(i + 1) * w], &d[(n + i) * w..(n + i + 1) * w]))
        .collect()
}

/// `c̃ = C(D(x))` in eval mode; `[3, S, S]` gives `[1, d]`.
pub fn classify(bundle: &ModelBundle, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    Ok(bundle.encode(&as_batch(x)?)?.1)
}

/// Held-out metrics of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: String,
    pub samples: usize,
    /// Attribute recognition error at threshold 0.5.
    pub hamming: f64,
    /// Mean squared error between images and their reconstructions.
    pub pixel_mse: f64,
    /// Mean squared error between sampled `z` and `z̃` recovered from
    /// `G(z, c)`.
    pub latent_mse: f64,
    /// Identity score of each image against its reconstruction.
    pub identity_scores: Vec<f64>,
    pub mean_identity: f64,
    pub identity_metric: String,
}

/// Evaluates `bundle` on every image of `data`. Identity scores are taken
/// under `judge`'s embedding (the model itself when `None`); latent codes
/// for the recovery metric are drawn from `seed`.
pub fn evaluate<D: Dataset + ?Sized>(
    bundle: &ModelBundle,
    judge: Option<&ModelBundle>,
    data: &D,
    seed: u64,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Argument("evaluation set is empty".into()));
    }
    let judge = judge.unwrap_or(bundle);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut wrong, mut pix, mut lat) = (0.0, 0.0, 0.0);
    let mut scores = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, c) = data.batch(chunk)?;
        let (z_tilde, c_tilde) = bundle.encode(&x)?;
        wrong += hamming_loss(&c_tilde, &c, 0.5)? * c.numel() as f64;
        let rebuilt = bundle.generate(&z_tilde, &c_tilde)?;
        pix += sq_err(&x, &rebuilt)?;
        scores.extend(identity_scores(judge, &x, &rebuilt)?);
        let z = Tensor::uniform(&[chunk.len(), bundle.arch.z_dim], -1.0, 1.0, &mut rng);
        let fake = bundle.generate(&z, &c)?;
        lat += sq_err(&z, &bundle.encode(&fake)?.0)?;
    }
    let n = data.len() as f64;
    let s = bundle.arch.image_size as f64;
    let mean_identity = scores.iter().sum::<f64>() / n;
    Ok(EvalReport {
        setting: "model".into(),
        samples: data.len(),
        hamming: wrong / (n * bundle.arch.attr_count as f64),
        pixel_mse: pix / (n * 3.0 * s * s),
        latent_mse: lat / (n * bundle.arch.z_dim as f64),
        identity_scores: scores,
        mean_identity,
        identity_metric: IDENTITY_METRIC.into(),
    })
}

fn sq_err(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum())
}

/// Aligned plain-text table of several reports.
pub fn report_table(reports: &[EvalReport]) -> String {
    let mut rows = vec![[
        "setting".to_string(),
        "hamming".into(),
        "pixel_mse".into(),
        "latent_mse".into(),
        "identity".into(),
    ]];
    for r in reports {
        rows.push([
            r.setting.clone(),
            format!("{:.4}", r.hamming),
            format!("{:.5}", r.pixel_mse),
            format!("{:.5}", r.latent_mse),
            format!("{:.5}", r.mean_identity),
        ]);
    }
    let widths: Vec<usize> = (0..5).map(|k| rows.iter().map(|r| r[k].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in &rows {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(k, c)| if k == 0 { format!("{c:<w$}", w = widths[k]) } else { format!("{c:>w$}", w = widths[k]) })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out.push_str(&format!("identity: {IDENTITY_METRIC}\n"));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, ArchConfig};

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f32> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn hamming_examples() {
        let truth = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(hamming_loss(&t(&[2, 2], &[0.9, 0.1, 0.2, 0.8]), &truth, 0.5).unwrap(), 0.0);
        assert_eq!(hamming_loss(&t(&[2, 2], &[0.1, 0.9, 0.8, 0.2]), &truth, 0.5).unwrap(), 1.0);
        let mut p = vec![0.9; 40];
        p[7] = 0.1;
        let h = hamming_loss(&t(&[1, 40], &p), &t(&[1, 40], &[1.0; 40]), 0.5).unwrap();
        assert!((h - 0.025).abs() < 1e-12);
        assert!(hamming_loss(&t(&[1, 2], &[0.0, 0.0]), &t(&[2, 1], &[0.0, 0.0]), 0.5).is_err());
    }

    #[test]
    fn cosine_properties() {
        assert!(cosine_distance(&[1.0, 2.0], &[2.0, 4.0]).unwrap() < 1e-12);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::DegenerateEmbedding(_))));
    }

    #[test]
    fn identity_score_zero_and_symmetric() {
        let m = init_params(&ArchConfig::new(16, 2, 0.125).unwrap(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::uniform(&[3, 16, 16], -0.9, 0.9, &mut rng);
        let b = Tensor::uniform(&[3, 16, 16], -0.9, 0.9, &mut rng);
        assert!(identity_score(&m, &a, &a).unwrap() < 1e-9);
        let ab = identity_score(&m, &a, &b).unwrap();
        let ba = identity_score(&m, &b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab > 0.0);
        let c = classify(&m, &a).unwrap();
        assert_eq!(c.shape(), &[1, 2]);
        assert_eq!(c, classify(&m, &a).unwrap());
    }

    #[test]
    fn table_lists_every_setting() {
        let r = EvalReport {
            setting: "integrated".into(),
            samples: 1,
            hamming: 0.1,
            pixel_mse: 0.2,
            latent_mse: 0.3,
            identity_scores: vec![0.4],
            mean_identity: 0.4,
            identity_metric: IDENTITY_METRIC.into(),
        };
        let table = report_table(&[r]);
        assert!(table.contains("integrated") && table.contains("0.40000"));
        assert!(table.contains("substitute"));
    }
}
