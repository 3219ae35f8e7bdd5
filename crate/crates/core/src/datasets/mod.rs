//! Labeled grayscale image sets and seeded mini-batching.

mod idx;
mod minidigits;

pub use idx::{encode_idx_images, encode_idx_labels, load_idx, parse_idx_images, parse_idx_labels};
pub use minidigits::{gen_minidigits, MINIDIGITS_SIZE};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{one_hot, Tensor};

/// `n` grayscale images with pixels in `[0, 1]` and labels in `0..classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl LabeledImages {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let [n, _, _] = images.shape()[..] else {
            return Err(Error::dim(
                "LabeledImages",
                format!("images must be n x h x w, got {:?}", images.shape()),
            ));
        };
        if n != labels.len() {
            return Err(Error::Consistency(format!("{n} images but {} labels", labels.len())));
        }
        if classes < 2 {
            return Err(Error::Argument("need at least 2 classes".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Validation(format!("label {bad} outside 0..{classes}")));
        }
        if images.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Validation("pixel outside [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `(height, width)` of every image.
    pub fn image_size(&self) -> (usize, usize) {
        (self.images.shape()[1], self.images.shape()[2])
    }

    pub fn one_hot(&self) -> Result<Tensor> {
        one_hot(&self.labels, self.classes)
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    /// The first `n` samples (all of them if `n >= len`).
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Sample indices grouped by class, ascending within each class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        self.class_indices().iter().map(Vec::len).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub epoch: usize,
}

impl BatchPlan {
    pub fn new(batch_size: usize, seed: u64, epoch: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Argument("batch size must be at least 1".into()));
        }
        Ok(Self {
            batch_size,
            seed,
            epoch,
        })
    }

    /// The epoch's permutation of `0..n`, cut into batches; the final batch
    /// may be short.
    pub fn index_batches(&self, n: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order.chunks(self.batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub one_hot: Tensor,
}

/// Materialises the batches of one epoch.
pub fn batches(data: &LabeledImages, plan: BatchPlan) -> Result<Vec<Batch>> {
    plan.index_batches(data.len())
        .into_iter()
        .map(|indices| {
            let labels: Vec<usize> = indices.iter().map(|&i| data.labels[i]).collect();
            Ok(Batch {
                images: data.images.select_rows(&indices)?,
                one_hot: one_hot(&labels, data.classes)?,
                labels,
                indices,
            })
        })
        .collect()
}
