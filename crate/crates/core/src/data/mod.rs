//! Labeled image sources: procedural face sprites, CelebA-format folders,
//! the shared preprocessing pipeline and seeded batching.

mod celeba;
mod preprocess;
mod synthetic;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use celeba::{
    parse_attr_list, split_indices, AttrList, AttrRow, CelebaDataset, CELEBA_ATTRIBUTE_COUNT, CELEBA_TEST, CELEBA_TRAIN,
};
pub use preprocess::{bilinear_resize, center_crop, preprocess, to_pixels, RawImage, CELEBA_MIN_SIDE};
pub use synthetic::{detect_attributes, render_sprite, SpriteStyle, SyntheticSpec, SYNTHETIC_ATTRIBUTES};

/// One image with its binary attribute labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[3, S, S]`, strictly inside (-1, 1).
    pub pixels: Tensor<f32>,
    pub attrs: Vec<bool>,
    pub id: String,
}

impl LabeledImage {
    pub fn attrs_tensor(&self) -> Tensor<f32> {
        let v: Vec<f32> = self.attrs.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
        Tensor::new(&[1, v.len()], v).expect("non-empty attribute vector")
    }
}

/// Read-only random access to labeled images.
pub trait Dataset: Send + Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn image_size(&self) -> usize;

    fn attributes(&self) -> &[String];

    fn get(&self, index: usize) -> Result<LabeledImage>;

    /// Stacks the given items into `([B, 3, S, S], [B, d])`.
    fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let s = self.image_size();
        let d = self.attributes().len();
        let mut pixels = Vec::with_capacity(indices.len() * 3 * s * s);
        let mut labels = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            let item = self.get(i)?;
            pixels.extend_from_slice(item.pixels.data());
            labels.extend(item.attrs.iter().map(|&a| if a { 1.0f32 } else { 0.0 }));
        }
        Ok((
            Tensor::new(&[indices.len(), 3, s, s], pixels)?,
            Tensor::new(&[indices.len(), d], labels)?,
        ))
    }
}

/// A dataset held entirely in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct InMemoryDataset {
    attributes: Vec<String>,
    image_size: usize,
    items: Vec<LabeledImage>,
}

impl InMemoryDataset {
    pub fn new(attributes: Vec<String>, image_size: usize, items: Vec<LabeledImage>) -> Result<Self> {
        for it in &items {
            if it.pixels.shape() != [3, image_size, image_size] {
                return Err(Error::Dimension(format!(
                    "image `{}` has shape {:?}, expected [3, {image_size}, {image_size}]",
                    it.id,
                    it.pixels.shape()
                )));
            }
            if it.attrs.len() != attributes.len() {
                return Err(Error::Dimension(format!(
                    "image `{}` has {} attributes, expected {}",
                    it.id,
                    it.attrs.len(),
                    attributes.len()
                )));
            }
        }
        Ok(InMemoryDataset {
            attributes,
            image_size,
            items,
        })
    }

    pub fn items(&self) -> &[LabeledImage] {
        &self.items
    }

    /// Copies the listed items into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let items = indices
            .iter()
            .map(|&i| {
                self.items
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Argument(format!("index {i} out of range for {} items", self.items.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        InMemoryDataset::new(self.attributes.clone(), self.image_size, items)
    }
}

impl Dataset for InMemoryDataset {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn image_size(&self) -> usize {
        self.image_size
    }

    fn attributes(&self) -> &[String] {
        &self.attributes
    }

    fn get(&self, index: usize) -> Result<LabeledImage> {
        self.items
            .get(index)
            .cloned()
            .ok_or_else(|| Error::Argument(format!("index {index} out of range for {} items", self.items.len())))
    }
}

/// Shuffled batch index lists for one epoch, a pure function of
/// `(n, batch_size, seed, epoch)`. The trailing partial batch is dropped.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Argument("dataset is empty".into()));
    }
    if batch_size == 0 || batch_size > n {
        return Err(Error::Argument(format!(
            "batch size {batch_size} must be between 1 and the dataset size {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    Ok(idx.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}

/// Iterator over one epoch of `(x, c)` batches.
pub struct BatchIter<'a, D: Dataset + ?Sized> {
    dataset: &'a D,
    order: std::vec::IntoIter<Vec<usize>>,
}

impl<D: Dataset + ?Sized> Iterator for BatchIter<'_, D> {
    type Item = Result<(Tensor<f32>, Tensor<f32>)>;

    fn next(&mut self) -> Option<Self::Item> {
        let idx = self.order.next()?;
        Some(self.dataset.batch(&idx))
    }
}

pub fn batch_iter<D: Dataset + ?Sized>(
    dataset: &D,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<BatchIter<'_, D>> {
    let order = batch_order(dataset.len(), batch_size, seed, epoch)?;
    Ok(BatchIter {
        dataset,
        order: order.into_iter(),
    })
}
