use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::{augment, AugmentationConfig};
use super::image::{decode_image, resize_bilinear};
use super::manifest::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
}

/// Decoded samples of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Subset {
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl Subset {
    pub fn new(split: Split, samples: Vec<Sample>) -> Self {
        Subset { split, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, 3, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Positions of the batch's samples in the subset.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Decodes the records of `split`, resized to `height × width`, labelled by
/// class index.
pub fn load_subset(
    manifest: &DatasetManifest,
    split: Split,
    height: usize,
    width: usize,
) -> Result<Subset> {
    let samples = manifest
        .subset(split)
        .into_iter()
        .map(|r| {
            let image = decode_image(manifest.image_path(r))?;
            Ok(Sample {
                image: resize_bilinear(&image, height, width)?,
                label: r.label.index(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Subset::new(split, samples))
}

/// Groups a subset into batches, keeping the final partial batch.
///
/// `shuffle_seed` permutes the order; `None` keeps subset order. Augmentation
/// draws use the sample's subset index as its stream, and is refused for
/// validation and test subsets.
pub fn make_batches(
    subset: &Subset,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    augmentation: Option<&AugmentationConfig>,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if subset.is_empty() {
        return Err(Error::EmptyDataset(format!("{} subset has no samples", subset.split)));
    }
    if let Some(cfg) = augmentation {
        if matches!(subset.split, Split::Val | Split::Test) {
            return Err(Error::Usage(format!(
                "augmentation is only applied to training data, not the {} subset",
                subset.split
            )));
        }
        cfg.validate()?;
    }
    let mut order: Vec<usize> = (0..subset.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let shape = subset.samples[0].image.shape().to_vec();
    order
        .chunks(batch_size)
        .map(|chunk| {
            let mut values = Vec::with_capacity(chunk.len() * subset.samples[0].image.numel());
            for &i in chunk {
                let s = &subset.samples[i];
                if s.image.shape() != shape.as_slice() {
                    return Err(Error::Shape(format!(
                        "sample {i} is {:?}, expected {shape:?}",
                        s.image.shape()
                    )));
                }
                match augmentation {
                    Some(cfg) => values.extend_from_slice(augment(&s.image, cfg, i as u64)?.values()),
                    None => values.extend_from_slice(s.image.values()),
                }
            }
            let mut batch_shape = vec![chunk.len()];
            batch_shape.extend_from_slice(&shape);
            Ok(Batch {
                images: Tensor::new(batch_shape, values)?,
                labels: chunk.iter().map(|&i| subset.samples[i].label).collect(),
                indices: chunk.to_vec(),
            })
        })
        .collect()
}
