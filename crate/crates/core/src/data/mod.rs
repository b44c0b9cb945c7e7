//! Labelled image sets: the CIFAR-10 binary batch format and a synthetic
//! two-class frequency dataset.

mod cifar;
mod synthetic;

pub use cifar::{decode_cifar10, encode_cifar10, read_cifar10, write_cifar10, CIFAR_RECORD_BYTES};
pub use synthetic::{synth_freq_dataset, SyntheticFreqSpec};

use crate::error::{config, Result};
use crate::tensor::Tensor;

/// Images `[N, C, H, W]` with pixels in `[0, 1]` and labels in `[0, K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    pub name: String,
    pub classes: usize,
    images: Tensor,
    labels: Vec<usize>,
}

impl LabeledImageSet {
    pub fn new(name: impl Into<String>, classes: usize, images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(config(format!(
                "{} labels for an image tensor of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(i) = images.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(config(format!("pixel {i} lies outside [0, 1]")));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(config(format!("label {l} is outside [0, {classes})")));
        }
        Ok(LabeledImageSet {
            name: name.into(),
            classes,
            images,
            labels,
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

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Gathers the given samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(config(format!("sample {i} out of range for {} samples", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.image_shape());
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx)?;
        Self::new(self.name.clone(), self.classes, images, labels)
    }

    /// Per-channel mean and standard deviation over the whole set.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let s = self.images.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let vals = (0..n).flat_map(|i| {
                let start = (i * c + ch) * hw;
                self.images.data()[start..start + hw].iter().copied()
            });
            let count = (n * hw) as f64;
            mean[ch] = vals.clone().sum::<f64>() / count;
            var[ch] = vals.map(|v| (v - mean[ch]).powi(2)).sum::<f64>() / count;
        }
        (mean, var.into_iter().map(|v| v.sqrt().max(1e-12)).collect())
    }
}
