//! Labeled image dataset carrier shared by training and evaluation.

use crate::{ModelError, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rome_nn::Tensor;

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[n, c, h, w]` images.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.shape().is_empty() || inputs.shape()[0] != labels.len() {
            return Err(ModelError::InvalidConfig(format!(
                "{} images vs {} labels",
                inputs.shape().first().copied().unwrap_or(0),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(ModelError::InvalidConfig("empty dataset".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(ModelError::InvalidConfig(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            inputs,
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

    /// Per-sample shape `[c, h, w]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Copies the samples at `idx` into a batch.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let row = self.inputs.row_len();
        let mut data = Vec::with_capacity(idx.len() * row);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.sample_shape());
        (
            Tensor::new(shape, data).expect("gather shape consistent"),
            labels,
        )
    }

    /// Shuffled minibatch index lists for one epoch.
    pub fn epoch_batches(&self, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
    }

    /// First `n` samples as one batch (deterministic evaluation slices).
    pub fn take(&self, n: usize) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.gather(&idx)
    }

    /// Splits into two datasets at sample `n` (first part gets `0..n`).
    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(ModelError::InvalidConfig(format!(
                "cannot split {} samples at {n}",
                self.len()
            )));
        }
        let (head_x, head_y) = self.gather(&(0..n).collect::<Vec<_>>());
        let (tail_x, tail_y) = self.gather(&(n..self.len()).collect::<Vec<_>>());
        Ok((
            Dataset::new(head_x, head_y, self.classes)?,
            Dataset::new(tail_x, tail_y, self.classes)?,
        ))
    }
}
