use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{RamError, Result};
use crate::tensor::Tensor;

use super::manifest::{DatasetManifest, Sample, Split};
use super::ppm::{self, ResizeMode};

/// Images of a manifest subset, decoded and resized to the model input.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Dense training label per sample (`None` outside the training split).
    pub labels: Vec<Option<usize>>,
    images: Vec<Tensor>,
    dims: (usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Positions in the owning [`Dataset`].
    pub indices: Vec<usize>,
    /// `n x C x H x W`.
    pub images: Tensor,
    pub ids: Vec<Option<usize>>,
    /// Per attribute (in the requested order), one optional label per image.
    pub attributes: Vec<Vec<Option<usize>>>,
}

impl Dataset {
    pub fn from_images(samples: Vec<Sample>, labels: Vec<Option<usize>>, images: Vec<Tensor>) -> Result<Self> {
        let Some(first) = images.first() else {
            return Err(RamError::Data("empty dataset".into()));
        };
        let dims = match first.shape() {
            &[c, h, w] => (c, h, w),
            s => return Err(RamError::Data(format!("images must be C x H x W, got {s:?}"))),
        };
        if images.iter().any(|i| i.shape() != [dims.0, dims.1, dims.2]) {
            return Err(RamError::Data("images have differing shapes".into()));
        }
        if samples.len() != images.len() || labels.len() != images.len() {
            return Err(RamError::Data("samples, labels and images differ in length".into()));
        }
        Ok(Dataset {
            samples,
            labels,
            images,
            dims,
        })
    }

    /// Loads the samples of `splits`, resized to `input = (C, H, W)`.
    pub fn load(manifest: &DatasetManifest, splits: &[Split], input: (usize, usize, usize), resize: ResizeMode) -> Result<Self> {
        let idx = manifest.indices(splits);
        if idx.is_empty() {
            let names: Vec<String> = splits.iter().map(ToString::to_string).collect();
            return Err(RamError::Data(format!("no samples in split(s) {}", names.join("/"))));
        }
        let mut samples = Vec::with_capacity(idx.len());
        let mut labels = Vec::with_capacity(idx.len());
        let mut images = Vec::with_capacity(idx.len());
        for i in idx {
            let s = &manifest.samples[i];
            let img = ppm::read_image(&manifest.image_path(s))?;
            if img.shape()[0] != input.0 {
                return Err(RamError::Data(format!(
                    "{} has {} channels, the model expects {}",
                    s.image_path,
                    img.shape()[0],
                    input.0
                )));
            }
            images.push(ppm::resize(&img, input.1, input.2, resize));
            labels.push(manifest.train_label(s));
            samples.push(s.clone());
        }
        Dataset::from_images(samples, labels, images)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    /// Stacks the given samples into a batch.
    pub fn batch(&self, indices: &[usize], attributes: &[String]) -> Batch {
        let (c, h, w) = self.dims;
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend_from_slice(self.images[i].data());
        }
        Batch {
            indices: indices.to_vec(),
            images: Tensor::new(vec![indices.len(), c, h, w], data).expect("stacked sizes agree"),
            ids: indices.iter().map(|&i| self.labels[i]).collect(),
            attributes: attributes
                .iter()
                .map(|name| indices.iter().map(|&i| self.samples[i].attribute(name)).collect())
                .collect(),
        }
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ (epoch as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded per-epoch shuffle of `0..n` cut into batches; the last short batch is kept.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(RamError::Data("empty training split".into()));
    }
    if batch_size == 0 || batch_size > n {
        return Err(RamError::Config(format!(
            "batch size {batch_size} must be in 1..={n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch)));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn make_batches(data: &Dataset, batch_size: usize, seed: u64, epoch: usize, attributes: &[String]) -> Result<Vec<Batch>> {
    Ok(batch_order(data.len(), batch_size, seed, epoch)?
        .iter()
        .map(|idx| data.batch(idx, attributes))
        .collect())
}
