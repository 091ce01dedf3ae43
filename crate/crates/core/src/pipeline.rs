//! Inference workflows shared by the command line and the HTTP service:
//! encoding, attribute edits, transformation, seeded generation and PNG I/O.

use std::fmt;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{preprocess, RawImage};
use crate::error::{Error, Result};
use crate::eval::identity_score;
use crate::nn::ModelBundle;
use crate::tensor::Tensor;

/// More simultaneous edits than this degrade reconstructions noticeably.
pub const MAX_RELIABLE_EDITS: usize = 3;

/// Images per row in contact sheets.
pub const GRID_COLUMNS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditValue {
    Set(bool),
    /// `1 - round(c̃)`: inverts the binarized belief.
    Flip,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Edit {
    pub name: String,
    pub value: EditValue,
}

impl fmt::Display for Edit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.value {
            EditValue::Set(v) => write!(f, "{}={}", self.name, v as u8),
            EditValue::Flip => write!(f, "{}=flip", self.name),
        }
    }
}

impl std::str::FromStr for Edit {
    type Err = Error;

    /// `name=0`, `name=1` or `name=flip`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Argument(format!("edit `{s}` is not of the form name=0|1|flip")))?;
        let value = match v.trim() {
            "0" => EditValue::Set(false),
            "1" => EditValue::Set(true),
            "flip" => EditValue::Flip,
            other => return Err(Error::Argument(format!("edit value `{other}` is not 0, 1 or flip"))),
        };
        let name = name.trim();
        if name.is_empty() {
            return Err(Error::Argument(format!("edit `{s}` has no attribute name")));
        }
        Ok(Edit {
            name: name.to_string(),
            value,
        })
    }
}

/// Warning text when more edits are requested than reconstruct reliably.
pub fn edit_warning(count: usize) -> Option<String> {
    (count > MAX_RELIABLE_EDITS).then(|| {
        format!("{count} simultaneous edits requested; image quality drops beyond {MAX_RELIABLE_EDITS}")
    })
}

/// Applies `edits` to an attribute vector `[1, d]` or `[d]`.
pub fn apply_edits(bundle: &ModelBundle, c_tilde: &Tensor<f32>, edits: &[Edit]) -> Result<Tensor<f32>> {
    if c_tilde.numel() != bundle.arch.attr_count {
        return Err(Error::Dimension(format!(
            "attribute vector has {} entries, model has {}",
            c_tilde.numel(),
            bundle.arch.attr_count
        )));
    }
    let mut c = c_tilde.clone();
    for e in edits {
        let i = bundle.attribute_index(&e.name)?;
        let slot = &mut c.data_mut()[i];
        *slot = match e.value {
            EditValue::Set(v) => v as u8 as f32,
            EditValue::Flip => 1.0 - slot.round(),
        };
    }
    Ok(c)
}

fn single(bundle: &ModelBundle, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = bundle.arch.image_size;
    if x.shape() != [3, s, s] {
        return Err(Error::Dimension(format!("expected an image of shape [3, {s}, {s}], got {:?}", x.shape())));
    }
    x.clone().reshape(&[1, 3, s, s])
}

/// `(z̃, c̃)` of one `[3, S, S]` image, as flat vectors.
pub fn encode_image(bundle: &ModelBundle, x: &Tensor<f32>) -> Result<(Vec<f32>, Vec<f32>)> {
    let (z, c) = bundle.encode(&single(bundle, x)?)?;
    Ok((z.into_data(), c.into_data()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transformed {
    /// `[3, S, S]`.
    pub image: Tensor<f32>,
    pub z_tilde: Vec<f32>,
    pub c_tilde: Vec<f32>,
    pub c_edited: Vec<f32>,
    /// Identity score between the input and the output.
    pub identity_score: f64,
    pub warning: Option<String>,
}

/// Encodes `x`, edits `c̃` and decodes with `G`. No edits gives the plain
/// reconstruction.
pub fn transform(bundle: &ModelBundle, x: &Tensor<f32>, edits: &[Edit]) -> Result<Transformed> {
    let xb = single(bundle, x)?;
    let (z, c) = bundle.encode(&xb)?;
    let edited = apply_edits(bundle, &c, edits)?;
    let out = bundle.generate(&z, &edited)?;
    let s = bundle.arch.image_size;
    let image = out.reshape(&[3, s, s])?;
    let score = identity_score(bundle, x, &image)?;
    Ok(Transformed {
        image,
        z_tilde: z.into_data(),
        c_tilde: c.into_data(),
        c_edited: edited.into_data(),
        identity_score: score,
        warning: edit_warning(edits.len()),
    })
}

/// Attribute vector from `name=0|1` assignments; unassigned entries are 0.
pub fn assignment(bundle: &ModelBundle, edits: &[Edit]) -> Result<Vec<f32>> {
    let zero = Tensor::zeros(&[1, bundle.arch.attr_count]);
    if let Some(e) = edits.iter().find(|e| e.value == EditValue::Flip) {
        return Err(Error::Argument(format!("`{e}`: flip needs an encoded image")));
    }
    Ok(apply_edits(bundle, &zero, edits)?.into_data())
}

/// `[count, z_dim]` codes from `U(-1, 1)`, a pure function of `seed`.
pub fn latents(count: usize, z_dim: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[count, z_dim], -1.0, 1.0, &mut rng)
}

/// `count` images `G(z, c)` with `z ~ U(-1, 1)` drawn from `seed`.
pub fn generate(bundle: &ModelBundle, c: &[f32], count: usize, seed: u64) -> Result<Tensor<f32>> {
    let d = bundle.arch.attr_count;
    if c.len() != d {
        return Err(Error::Dimension(format!("attribute vector has {} entries, model has {d}", c.len())));
    }
    if count == 0 {
        return Err(Error::Argument("count must be positive".into()));
    }
    let z = latents(count, bundle.arch.z_dim, seed);
    let cs = Tensor::new(&[count, d], c.repeat(count))?;
    bundle.generate(&z, &cs)
}

/// Inverse of the input scaling, rounded to bytes.
pub fn pixel_to_byte(v: f32) -> u8 {
    ((v as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// `[3, S, S]` (or `[1, 3, S, S]`) to interleaved RGB.
pub fn tensor_to_raw(x: &Tensor<f32>) -> Result<RawImage> {
    let s = x.shape();
    let (h, w) = match s {
        [3, h, w] | [1, 3, h, w] => (*h, *w),
        _ => return Err(Error::Dimension(format!("expected one RGB image, got {s:?}"))),
    };
    let plane = h * w;
    let d = x.data();
    let mut data = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for k in 0..3 {
            data.push(pixel_to_byte(d[k * plane + i]));
        }
    }
    RawImage::new(w, h, data)
}

/// Lays out `[N, 3, S, S]` as a sheet `columns` images wide.
pub fn grid(images: &Tensor<f32>, columns: usize) -> Result<RawImage> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 || columns == 0 {
        return Err(Error::Dimension(format!("expected [N, 3, H, W], got {s:?}")));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let cols = columns.min(n);
    let rows = n.div_ceil(cols);
    let (gw, gh) = (cols * w, rows * h);
    let mut data = vec![0u8; gw * gh * 3];
    for i in 0..n {
        let tile = tensor_to_raw(&images.row(i)?)?;
        let (ox, oy) = ((i % cols) * w, (i / cols) * h);
        for y in 0..h {
            let dst = ((oy + y) * gw + ox) * 3;
            data[dst..dst + w * 3].copy_from_slice(&tile.data[y * w * 3..(y + 1) * w * 3]);
        }
    }
    RawImage::new(gw, gh, data)
}

pub fn encode_png(img: &RawImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(&img.data, img.width as u32, img.height as u32, ExtendedColorType::Rgb8)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out)
}

pub fn write_png(img: &RawImage, path: &Path) -> Result<()> {
    std::fs::write(path, encode_png(img)?).map_err(|e| Error::io(path, e))
}

/// Decodes image bytes and prepares them for a model of side `size`.
/// Inputs smaller than `size` are rejected.
pub fn load_image_bytes(bytes: &[u8], size: usize) -> Result<Tensor<f32>> {
    let raw = RawImage::decode(bytes)?;
    preprocess(&raw, size, size)
}

pub fn load_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_image_bytes(&bytes, size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, ArchConfig};

    fn model() -> ModelBundle {
        let names = ["glasses", "smile", "hat", "bangs", "mustache"].map(String::from).to_vec();
        init_params(&ArchConfig::new(16, 5, 0.125).unwrap(), 2)
            .unwrap()
            .with_attributes(names)
            .unwrap()
    }

    #[test]
    fn edit_parsing() {
        let e: Edit = "glasses=flip".parse().unwrap();
        assert_eq!(e.value, EditValue::Flip);
        assert_eq!(e.to_string(), "glasses=flip");
        assert_eq!("smile=1".parse::<Edit>().unwrap().value, EditValue::Set(true));
        assert!("smile".parse::<Edit>().is_err());
        assert!("smile=2".parse::<Edit>().is_err());
        assert!("=1".parse::<Edit>().is_err());
    }

    #[test]
    fn flip_uses_rounded_belief() {
        let m = model();
        let c = Tensor::from_f64(&[1, 5], &[0.9, 0.2, 0.5, 0.4, 0.7]).unwrap();
        let flip = |n: &str| Edit {
            name: n.into(),
            value: EditValue::Flip,
        };
        let out = apply_edits(&m, &c, &[flip("glasses"), flip("smile")]).unwrap();
        assert_eq!(&out.data()[..2], &[0.0, 1.0]);
        assert_eq!(&out.data()[2..], &c.data()[2..]);
        let twice = apply_edits(&m, &out, &[flip("glasses")]).unwrap();
        assert_eq!(twice.data()[0], 1.0);
        let err = apply_edits(&m, &c, &[flip("beard")]).unwrap_err();
        assert!(err.to_string().contains("mustache"));
    }

    #[test]
    fn empty_transform_is_reconstruction() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::uniform(&[3, 16, 16], -0.9, 0.9, &mut rng);
        let t = transform(&m, &x, &[]).unwrap();
        let rebuilt = m.rebuild(&x.clone().reshape(&[1, 3, 16, 16]).unwrap()).unwrap();
        assert_eq!(t.image.data(), rebuilt.data());
        assert!(t.identity_score >= 0.0);
        assert_eq!(t.c_edited, t.c_tilde);
        assert!(t.warning.is_none());
        assert!(edit_warning(3).is_none() && edit_warning(4).is_some());
    }

    #[test]
    fn seeded_generation_and_grid() {
        let m = model();
        let c = assignment(&m, &["hat=1".parse().unwrap()]).unwrap();
        assert_eq!(c, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        let a = generate(&m, &c, 10, 5).unwrap();
        assert_eq!(a, generate(&m, &c, 10, 5).unwrap());
        assert_ne!(a, generate(&m, &c, 10, 6).unwrap());
        let g = grid(&a, GRID_COLUMNS).unwrap();
        assert_eq!((g.width, g.height), (8 * 16, 2 * 16));
        let png = encode_png(&g).unwrap();
        assert_eq!(RawImage::decode(&png).unwrap(), g);
    }

    #[test]
    fn png_round_trip_is_within_quantization() {
        let m = model();
        let img = generate(&m, &[0.0; 5], 1, 1).unwrap();
        let png = encode_png(&tensor_to_raw(&img).unwrap()).unwrap();
        let back = load_image_bytes(&png, 16).unwrap();
        let diff = back.max_abs_diff(&img.reshape(&[3, 16, 16]).unwrap()).unwrap();
        assert!(diff <= 1.0 / 127.5 + 1e-6);
        assert!(matches!(load_image_bytes(&png, 32), Err(Error::Dimension(_))));
    }
}
