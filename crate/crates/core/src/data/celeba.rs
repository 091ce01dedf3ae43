//! CelebA-format attribute lists and lazily loaded image folders.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::preprocess::{preprocess, RawImage, CELEBA_MIN_SIDE};
use super::{Dataset, LabeledImage};
use crate::error::{Error, Result};

pub const CELEBA_ATTRIBUTE_COUNT: usize = 40;
pub const CELEBA_TRAIN: usize = 185_000;
pub const CELEBA_TEST: usize = 15_000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttrRow {
    pub file: String,
    pub values: Vec<bool>,
}

/// Parsed attribute list: names in column order and one row per image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttrList {
    pub names: Vec<String>,
    pub rows: Vec<AttrRow>,
}

impl AttrList {
    /// Writes the list back in the original `±1` text format.
    pub fn to_text(&self) -> String {
        let mut s = format!("{}\n{}\n", self.rows.len(), self.names.join(" "));
        for r in &self.rows {
            s.push_str(&r.file);
            for &v in &r.values {
                let _ = write!(s, " {}", if v { "1" } else { "-1" });
            }
            s.push('\n');
        }
        s
    }
}

/// Parses the CelebA attribute list: an image count, a line of 40
/// attribute names, then `filename v1 .. v40` rows with `v ∈ {-1, 1}`.
/// Labels map `-1 → false`, `1 → true`.
pub fn parse_attr_list(text: &str) -> Result<AttrList> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "missing image count".into(),
    })?;
    let declared: usize = first.trim().parse().map_err(|_| Error::Parse {
        line: 1,
        msg: format!("expected image count, found `{}`", first.trim()),
    })?;
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 2,
        msg: "missing attribute names".into(),
    })?;
    let names: Vec<String> = header.split_whitespace().map(str::to_string).collect();
    if names.len() != CELEBA_ATTRIBUTE_COUNT {
        return Err(Error::Format(format!(
            "expected {CELEBA_ATTRIBUTE_COUNT} attribute names, found {}",
            names.len()
        )));
    }
    let mut rows = Vec::new();
    for (line, raw) in lines {
        let mut fields = raw.split_whitespace();
        let Some(file) = fields.next() else { continue };
        let values = fields
            .map(|f| match f {
                "1" => Ok(true),
                "-1" => Ok(false),
                other => Err(Error::Parse {
                    line,
                    msg: format!("attribute value `{other}` is not 1 or -1"),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != names.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} values for `{file}`, found {}", names.len(), values.len()),
            });
        }
        rows.push(AttrRow {
            file: file.to_string(),
            values,
        });
    }
    if rows.len() != declared {
        return Err(Error::Format(format!(
            "header declares {declared} images but {} rows follow",
            rows.len()
        )));
    }
    Ok(AttrList { names, rows })
}

/// Seeded train/test split. With at least 200000 images it takes exactly
/// 185000/15000; smaller sets are split 92.5% / 7.5%.
pub fn split_indices(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Argument(format!("cannot split {n} images")));
    }
    let (train, test) = if n >= CELEBA_TRAIN + CELEBA_TEST {
        (CELEBA_TRAIN, CELEBA_TEST)
    } else {
        let test = ((n as f64 * 0.075).round() as usize).clamp(1, n - 1);
        (n - test, test)
    };
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((idx[..train].to_vec(), idx[train..train + test].to_vec()))
}

/// Images on disk, decoded and preprocessed on access.
#[derive(Clone, Debug)]
pub struct CelebaDataset {
    dir: PathBuf,
    names: Vec<String>,
    rows: Vec<AttrRow>,
    image_size: usize,
    missing: usize,
}

impl CelebaDataset {
    /// Reads the attribute list and keeps rows whose image file exists.
    pub fn open(image_dir: &Path, attr_file: &Path, image_size: usize) -> Result<Self> {
        let text = std::fs::read_to_string(attr_file).map_err(|e| Error::io(attr_file, e))?;
        let list = parse_attr_list(&text)?;
        let total = list.rows.len();
        let rows: Vec<AttrRow> = list
            .rows
            .into_iter()
            .filter(|r| image_dir.join(&r.file).is_file())
            .collect();
        Ok(CelebaDataset {
            dir: image_dir.to_path_buf(),
            names: list.names,
            missing: total - rows.len(),
            rows,
            image_size,
        })
    }

    /// Rows dropped because their image file was absent.
    pub fn missing(&self) -> usize {
        self.missing
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let rows = indices
            .iter()
            .map(|&i| {
                self.rows
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Argument(format!("index {i} out of range for {} rows", self.rows.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CelebaDataset {
            rows,
            ..self.clone()
        })
    }
}

impl Dataset for CelebaDataset {
    fn len(&self) -> usize {
        self.rows.len()
    }

    fn image_size(&self) -> usize {
        self.image_size
    }

    fn attributes(&self) -> &[String] {
        &self.names
    }

    fn get(&self, index: usize) -> Result<LabeledImage> {
        let row = self
            .rows
            .get(index)
            .ok_or_else(|| Error::Argument(format!("index {index} out of range for {} rows", self.rows.len())))?;
        let raw = RawImage::open(&self.dir.join(&row.file))?;
        Ok(LabeledImage {
            pixels: preprocess(&raw, self.image_size, CELEBA_MIN_SIDE)?,
            attrs: row.values.clone(),
            id: row.file.clone(),
        })
    }
}
