//! Crop, resize and rescale raw RGB images into network input.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shortest side of the aligned CelebA frames.
pub const CELEBA_MIN_SIDE: usize = 178;

/// Largest magnitude a pixel may take; keeps values strictly inside (-1, 1).
const PIXEL_LIMIT: f64 = 1.0 - 1.0 / (1u32 << 20) as f64;

/// Interleaved 8-bit RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "{} bytes do not form a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(RawImage { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        RawImage { width, height, data }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes).map_err(|e| Error::Image(e.to_string()))?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        RawImage::new(w as usize, h as usize, rgb.into_raw())
    }

    pub fn open(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Maps an intensity in `[0, 1]` to the open pixel range.
pub(crate) fn unit_to_pixel(x: f64) -> f32 {
    (2.0 * x - 1.0).clamp(-PIXEL_LIMIT, PIXEL_LIMIT) as f32
}

/// `b / 127.5 - 1`, clamped into (-1, 1).
pub fn to_pixels(b: u8) -> f32 {
    (b as f64 / 127.5 - 1.0).clamp(-PIXEL_LIMIT, PIXEL_LIMIT) as f32
}

/// Largest centred square of `img`.
pub fn center_crop(img: &RawImage) -> RawImage {
    let side = img.width.min(img.height);
    let x0 = (img.width - side) / 2;
    let y0 = (img.height - side) / 2;
    let mut data = Vec::with_capacity(side * side * 3);
    for y in y0..y0 + side {
        let row = (y * img.width + x0) * 3;
        data.extend_from_slice(&img.data[row..row + side * 3]);
    }
    RawImage {
        width: side,
        height: side,
        data,
    }
}

/// Bilinear resampling of an interleaved `h×w×3` float image with
/// half-pixel centres and edge clamping.
pub fn bilinear_resize(src: &[f64], w: usize, h: usize, ow: usize, oh: usize) -> Vec<f64> {
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, x - i0 as f64)
    };
    let mut out = vec![0.0; ow * oh * 3];
    for oy in 0..oh {
        let (y0, y1, fy) = coord(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = coord(ox, w, ow);
            for k in 0..3 {
                let p = |x: usize, y: usize| src[(y * w + x) * 3 + k];
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                out[(oy * ow + ox) * 3 + k] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Centre-crops to a square, resizes bilinearly to `size` and rescales to
/// `[3, size, size]` in (-1, 1). Images whose shorter side is below
/// `min_side` are rejected.
pub fn preprocess(img: &RawImage, size: usize, min_side: usize) -> Result<Tensor<f32>> {
    if size == 0 {
        return Err(Error::Argument("target size must be positive".into()));
    }
    if img.width.min(img.height) < min_side.max(1) {
        return Err(Error::Dimension(format!(
            "image is {}x{}, shorter side must be at least {min_side}",
            img.width, img.height
        )));
    }
    let sq = center_crop(img);
    let plane = size * size;
    let mut out = vec![0f32; 3 * plane];
    if sq.width == size {
        for (i, px) in sq.data.chunks_exact(3).enumerate() {
            for k in 0..3 {
                out[k * plane + i] = to_pixels(px[k]);
            }
        }
    } else {
        let src: Vec<f64> = sq.data.iter().map(|&b| b as f64).collect();
        let resized = bilinear_resize(&src, sq.width, sq.height, size, size);
        for (i, px) in resized.chunks_exact(3).enumerate() {
            for k in 0..3 {
                out[k * plane + i] = (px[k] / 127.5 - 1.0).clamp(-PIXEL_LIMIT, PIXEL_LIMIT) as f32;
            }
        }
    }
    Tensor::new(&[3, size, size], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_gray() {
        let img = RawImage::from_fn(178, 218, |_, _| [128; 3]);
        let t = preprocess(&img, 128, CELEBA_MIN_SIDE).unwrap();
        assert_eq!(t.shape(), &[3, 128, 128]);
        for &v in t.data() {
            assert!((v as f64 - (128.0 / 127.5 - 1.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn extremes_stay_open() {
        let img = RawImage::from_fn(178, 218, |x, y| if (x / 7 + y / 7) % 2 == 0 { [0; 3] } else { [255; 3] });
        let t = preprocess(&img, 128, CELEBA_MIN_SIDE).unwrap();
        assert!(t.data().iter().all(|v| v.abs() < 1.0));
        assert!(to_pixels(0) > -1.0 && to_pixels(255) < 1.0);
    }

    #[test]
    fn crop_is_vertically_centred() {
        let img = RawImage::from_fn(4, 8, |_, y| [y as u8; 3]);
        let c = center_crop(&img);
        assert_eq!((c.width, c.height), (4, 4));
        assert_eq!(c.data[0], 2);
        assert_eq!(c.data[c.data.len() - 1], 5);
    }

    #[test]
    fn undersized_rejected() {
        let img = RawImage::from_fn(100, 218, |_, _| [0; 3]);
        assert!(matches!(preprocess(&img, 128, CELEBA_MIN_SIDE), Err(Error::Dimension(_))));
    }

    #[test]
    fn identity_resize() {
        let src: Vec<f64> = (0..5 * 4 * 3).map(|i| i as f64).collect();
        assert_eq!(bilinear_resize(&src, 5, 4, 5, 4), src);
    }

    #[test]
    fn bad_buffer_rejected() {
        assert!(RawImage::new(2, 2, vec![0; 11]).is_err());
        assert!(RawImage::decode(b"not an image").is_err());
    }
}
