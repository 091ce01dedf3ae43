//! Procedural face sprites with independently visible binary attributes.
//!
//! Geometry lives in unit coordinates (`u` right, `v` down) and is rendered
//! with 4×4 supersampling. Every attribute only paints inside its own
//! region, so toggling one leaves the rest of the image untouched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{InMemoryDataset, LabeledImage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SYNTHETIC_ATTRIBUTES: [&str; 8] = [
    "round_face",
    "glasses",
    "bangs",
    "smile",
    "mustache",
    "dark_hair",
    "hat",
    "big_eyes",
];

const ROUND_FACE: usize = 0;
const GLASSES: usize = 1;
const BANGS: usize = 2;
const SMILE: usize = 3;
const MUSTACHE: usize = 4;
const DARK_HAIR: usize = 5;
const HAT: usize = 6;
const BIG_EYES: usize = 7;

const SUPERSAMPLE: usize = 4;
const EYES_U: [f64; 2] = [0.38, 0.62];
const EYES_V: f64 = 0.50;

const WHITE: [f64; 3] = [0.97, 0.97, 0.95];
const PUPIL: [f64; 3] = [0.08, 0.06, 0.10];
const FRAME: [f64; 3] = [0.06, 0.06, 0.08];
const MUSTACHE_TONE: [f64; 3] = [0.25, 0.15, 0.10];
const LIP: [f64; 3] = [0.85, 0.10, 0.20];

type Rgb = [f64; 3];

/// Continuous per-sprite appearance that carries no label information.
#[derive(Clone, Debug, PartialEq)]
pub struct SpriteStyle {
    pub skin: Rgb,
    pub dark_hair: Rgb,
    pub light_hair: Rgb,
    pub background: Rgb,
    pub hat: Rgb,
    /// Low-frequency cosine coefficients shading the background.
    pub background_texture: Texture,
    /// Same for the skin.
    pub skin_texture: Texture,
}

/// Frequencies per axis of the texture basis.
const TEXTURE_FREQS: usize = 4;

/// Per-channel coefficients of `cos(pi kx u) cos(pi ky v)`, constant term excluded.
pub type Texture = [[f64; TEXTURE_FREQS * TEXTURE_FREQS - 1]; 3];

fn texture<R: Rng + ?Sized>(amp: f64, rng: &mut R) -> Texture {
    let mut t = [[0.0; TEXTURE_FREQS * TEXTURE_FREQS - 1]; 3];
    for ch in &mut t {
        for c in ch.iter_mut() {
            *c = rng.random_range(-1.0..1.0) * amp;
        }
    }
    t
}

fn textured(base: Rgb, tex: &Texture, u: f64, v: f64) -> Rgb {
    let cu: [f64; TEXTURE_FREQS] = std::array::from_fn(|k| (std::f64::consts::PI * k as f64 * u).cos());
    let cv: [f64; TEXTURE_FREQS] = std::array::from_fn(|k| (std::f64::consts::PI * k as f64 * v).cos());
    let mut out = base;
    for (o, coef) in out.iter_mut().zip(tex) {
        let mut acc = 0.0;
        for (n, c) in coef.iter().enumerate() {
            let k = n + 1;
            acc += c * cu[k % TEXTURE_FREQS] * cv[k / TEXTURE_FREQS];
        }
        *o = (*o + acc).clamp(0.0, 1.0);
    }
    out
}

fn jitter<R: Rng + ?Sized>(base: Rgb, shared: f64, own: f64, rng: &mut R) -> Rgb {
    let s = rng.random_range(-1.0..1.0) * shared;
    let mut out = base;
    for ch in &mut out {
        *ch = (*ch + s + rng.random_range(-1.0..1.0) * own).clamp(0.0, 1.0);
    }
    out
}

impl SpriteStyle {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        SpriteStyle {
            skin: jitter([0.87, 0.67, 0.55], 0.06, 0.015, rng),
            dark_hair: jitter([0.16, 0.11, 0.08], 0.05, 0.02, rng),
            light_hair: jitter([0.86, 0.72, 0.30], 0.05, 0.02, rng),
            background: jitter([0.60, 0.66, 0.76], 0.08, 0.03, rng),
            hat: jitter([0.62, 0.12, 0.36], 0.05, 0.03, rng),
            background_texture: texture(0.05, rng),
            skin_texture: texture(0.015, rng),
        }
    }
}

fn in_ellipse(u: f64, v: f64, cu: f64, cv: f64, ru: f64, rv: f64) -> bool {
    let a = (u - cu) / ru;
    let b = (v - cv) / rv;
    a * a + b * b < 1.0
}

fn in_box(u: f64, v: f64, u0: f64, u1: f64, v0: f64, v1: f64) -> bool {
    u >= u0 && u < u1 && v >= v0 && v < v1
}

fn head_radii(round: bool) -> (f64, f64) {
    if round {
        (0.33, 0.34)
    } else {
        (0.24, 0.36)
    }
}

fn shade(u: f64, v: f64, a: &[bool], st: &SpriteStyle) -> Rgb {
    let (ru, rv) = head_radii(a[ROUND_FACE]);
    let hair = if a[DARK_HAIR] { st.dark_hair } else { st.light_hair };
    let in_head = in_ellipse(u, v, 0.5, 0.56, ru, rv);
    let mut col = if in_head {
        textured(st.skin, &st.skin_texture, u, v)
    } else {
        textured(st.background, &st.background_texture, u, v)
    };
    if v < 0.36 && in_ellipse(u, v, 0.5, 0.50, ru + 0.03, 0.40) {
        col = hair;
    }
    if a[BANGS] && in_head && (0.36..0.44).contains(&v) {
        col = hair;
    }
    for eu in EYES_U {
        let r = (u - eu).hypot(v - EYES_V);
        if a[BIG_EYES] {
            if r < 0.075 {
                col = WHITE;
            }
            if r < 0.03 {
                col = PUPIL;
            }
        } else if r < 0.035 {
            col = PUPIL;
        }
        if a[GLASSES] && (0.08..0.115).contains(&r) {
            col = FRAME;
        }
    }
    if a[GLASSES] && in_box(u, v, 0.49, 0.51, 0.49, 0.51) {
        col = FRAME;
    }
    if a[MUSTACHE] && in_box(u, v, 0.40, 0.60, 0.655, 0.695) {
        col = MUSTACHE_TONE;
    }
    if a[SMILE] {
        let r = (u - 0.5).hypot(v - 0.64);
        if (0.10..0.13).contains(&r) && v > 0.69 {
            col = LIP;
        }
    } else if in_box(u, v, 0.41, 0.59, 0.755, 0.78) {
        col = LIP;
    }
    if a[HAT] && (in_box(u, v, 0.30, 0.70, 0.03, 0.17) || in_box(u, v, 0.16, 0.84, 0.15, 0.21)) {
        col = st.hat;
    }
    col
}

/// Renders one `[3, size, size]` sprite in (-1, 1).
pub fn render_sprite(attrs: &[bool], style: &SpriteStyle, size: usize) -> Result<Tensor<f32>> {
    if attrs.len() != SYNTHETIC_ATTRIBUTES.len() {
        return Err(Error::Dimension(format!(
            "sprites take {} attributes, got {}",
            SYNTHETIC_ATTRIBUTES.len(),
            attrs.len()
        )));
    }
    if size == 0 {
        return Err(Error::Argument("sprite size must be positive".into()));
    }
    let plane = size * size;
    let mut out = vec![0f32; 3 * plane];
    let n = SUPERSAMPLE as f64;
    let norm = 1.0 / (n * n);
    for i in 0..size {
        for j in 0..size {
            let mut acc = [0f64; 3];
            for si in 0..SUPERSAMPLE {
                for sj in 0..SUPERSAMPLE {
                    let u = (j as f64 + (sj as f64 + 0.5) / n) / size as f64;
                    let v = (i as f64 + (si as f64 + 0.5) / n) / size as f64;
                    let c = shade(u, v, attrs, style);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            for k in 0..3 {
                out[k * plane + i * size + j] = super::preprocess::unit_to_pixel(acc[k] * norm);
            }
        }
    }
    Tensor::new(&[3, size, size], out)
}

/// Parameters of a synthetic sprite dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub seed: u64,
    /// Probability of each attribute being present.
    pub p: f64,
}

impl SyntheticSpec {
    pub fn new(image_size: usize, seed: u64) -> Self {
        SyntheticSpec {
            image_size,
            seed,
            p: 0.5,
        }
    }

    pub fn attributes() -> Vec<String> {
        SYNTHETIC_ATTRIBUTES.iter().map(|s| s.to_string()).collect()
    }

    /// Sprite number `index`; depends only on `(seed, index)`.
    pub fn item(&self, index: u64) -> Result<LabeledImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let attrs: Vec<bool> = (0..SYNTHETIC_ATTRIBUTES.len()).map(|_| rng.random_bool(self.p)).collect();
        let style = SpriteStyle::sample(&mut rng);
        Ok(LabeledImage {
            pixels: render_sprite(&attrs, &style, self.image_size)?,
            attrs,
            id: format!("synthetic-{}-{index}", self.seed),
        })
    }

    /// Sprites `0..n`.
    pub fn generate(&self, n: usize) -> Result<InMemoryDataset> {
        self.generate_range(0, n)
    }

    /// Sprites `start..start + n`; disjoint ranges give disjoint samples.
    pub fn generate_range(&self, start: u64, n: usize) -> Result<InMemoryDataset> {
        if n == 0 {
            return Err(Error::Argument("need at least one sprite".into()));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Argument(format!("attribute probability {} outside [0, 1]", self.p)));
        }
        let items = (start..start + n as u64)
            .map(|i| self.item(i))
            .collect::<Result<Vec<_>>>()?;
        InMemoryDataset::new(Self::attributes(), self.image_size, items)
    }
}

/// Colours of the pixels whose centres fall in the unit-coordinate box.
fn region(px: &Tensor<f32>, u0: f64, u1: f64, v0: f64, v1: f64) -> Vec<Rgb> {
    let s = px.shape()[1];
    let plane = s * s;
    let d = px.data();
    let mut out = Vec::new();
    for i in 0..s {
        let v = (i as f64 + 0.5) / s as f64;
        if v < v0 || v > v1 {
            continue;
        }
        for j in 0..s {
            let u = (j as f64 + 0.5) / s as f64;
            if u < u0 || u > u1 {
                continue;
            }
            let at = |k: usize| (d[k * plane + i * s + j] as f64 + 1.0) / 2.0;
            out.push([at(0), at(1), at(2)]);
        }
    }
    out
}

fn luma(c: &Rgb) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn mean(cs: &[Rgb]) -> Rgb {
    let n = cs.len().max(1) as f64;
    let mut m = [0.0; 3];
    for c in cs {
        for k in 0..3 {
            m[k] += c[k] / n;
        }
    }
    m
}

fn dist(a: &Rgb, b: &Rgb) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Hand-written detector reading each attribute straight off the pixels of
/// a `[3, S, S]` sprite.
pub fn detect_attributes(px: &Tensor<f32>) -> Result<Vec<bool>> {
    let s = px.shape();
    if s.len() != 3 || s[0] != 3 || s[1] != s[2] || s[1] < 16 {
        return Err(Error::Dimension(format!("detector expects [3, S, S] with S >= 16, got {s:?}")));
    }
    let skin = mean(&region(px, 0.46, 0.54, 0.58, 0.62));
    let skin_luma = luma(&skin);
    let background = mean(&region(px, 0.0, 0.08, 0.9, 1.0));
    let hair = mean(&region(px, 0.45, 0.55, 0.27, 0.33));
    let max_luma = |cs: &[Rgb]| cs.iter().map(luma).fold(f64::MIN, f64::max);
    let min_luma = |cs: &[Rgb]| cs.iter().map(luma).fold(f64::MAX, f64::min);

    let mut out = vec![false; SYNTHETIC_ATTRIBUTES.len()];
    let cheeks: Vec<Rgb> = [0.20, 0.80]
        .iter()
        .map(|&u| mean(&region(px, u - 0.02, u + 0.02, 0.60, 0.66)))
        .collect();
    out[ROUND_FACE] = cheeks.iter().all(|c| dist(c, &skin) < dist(c, &background));

    let rims: Vec<Rgb> = EYES_U
        .iter()
        .flat_map(|&u| region(px, u - 0.03, u + 0.03, 0.585, 0.61))
        .collect();
    out[GLASSES] = min_luma(&rims) < skin_luma - 0.2;

    let forehead = mean(&region(px, 0.45, 0.55, 0.385, 0.415));
    out[BANGS] = dist(&forehead, &hair) < dist(&forehead, &skin);

    let corners: Vec<Rgb> = [0.40, 0.60]
        .iter()
        .flat_map(|&u| region(px, u - 0.016, u + 0.016, 0.695, 0.72))
        .collect();
    let redness = corners.iter().map(|c| c[0] - c[1]).fold(f64::MIN, f64::max);
    out[SMILE] = redness > (skin[0] - skin[1]) + 0.2;

    let lip = mean(&region(px, 0.45, 0.55, 0.66, 0.69));
    out[MUSTACHE] = luma(&lip) < skin_luma - 0.2;

    out[DARK_HAIR] = luma(&hair) < 0.45;

    let brim = mean(&region(px, 0.17, 0.25, 0.16, 0.20));
    out[HAT] = dist(&brim, &background) > 0.25;

    let eyes: Vec<Rgb> = EYES_U
        .iter()
        .flat_map(|&u| region(px, u - 0.08, u + 0.08, 0.445, 0.555))
        .collect();
    out[BIG_EYES] = max_luma(&eyes) > 0.86;
    Ok(out)
}
