use std::f64::consts::PI;

use crate::data::LabeledImageSet;
use crate::error::{config, Result};
use crate::nn::{predict, Network};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// One Fourier basis perturbation: frequency `(i, j)` on an `n x n` image
/// with ℓ2 norm `v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FourierBasisSpec {
    pub i: usize,
    pub j: usize,
    pub v: f64,
    pub n: usize,
}

/// Real cosine wave `cos(2π(i·m + j·n)/N)` scaled to ℓ2 norm `v`. Its 2-D
/// DFT is supported on `(i, j)` and `(-i mod N, -j mod N)` only.
pub fn fourier_basis(spec: &FourierBasisSpec) -> Result<Tensor> {
    let FourierBasisSpec { i, j, v, n } = *spec;
    if n == 0 || i >= n || j >= n {
        return Err(config(format!("frequency ({i}, {j}) outside a {n}x{n} grid")));
    }
    if !(v >= 0.0) || !v.is_finite() {
        return Err(config(format!("basis norm {v} must be finite and non-negative")));
    }
    let wave = Tensor::from_fn([n, n], |k| {
        let (m, c) = (k / n, k % n);
        // Reduce the phase index modulo N first so it stays exact.
        let phase = ((i * m + j * c) % n) as f64 / n as f64;
        (2.0 * PI * phase).cos()
    });
    let norm = wave.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(wave.map(|x| x * v / norm))
}

/// Deterministic ±1 applied to the basis for one (sample, frequency) use.
pub fn basis_sign(seed: u64, sample: usize, i: usize, j: usize) -> f64 {
    if derive_seed(seed, &[sample as u64, i as u64, j as u64]) & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Error rate per frequency cell, row-major over `side x side`.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierHeatmap {
    pub side: usize,
    pub cells: Vec<f64>,
    pub norm_v: f64,
    pub sample_count: usize,
}

impl FourierHeatmap {
    pub fn cell(&self, i: usize, j: usize) -> f64 {
        self.cells[i * self.side + j]
    }

    /// Mean error over cells with both indices in `[N/4, 3N/4)`. In DFT
    /// index order these are the frequencies farthest from DC.
    pub fn high_frequency_mean(&self) -> f64 {
        let (lo, hi) = (self.side / 4, (3 * self.side).div_ceil(4));
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in lo..hi {
            for j in lo..hi {
                sum += self.cell(i, j);
                count += 1;
            }
        }
        sum / count.max(1) as f64
    }

    /// Cells rescaled by per-map min-max to `[0, 1]` (all zeros when flat).
    pub fn normalized(&self) -> Vec<f64> {
        let lo = self.cells.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.cells.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        self.cells
            .iter()
            .map(|&c| if span > 0.0 { (c - lo) / span } else { 0.0 })
            .collect()
    }
}

/// Adds `sign * basis` to every channel of every image and clips to `[0, 1]`.
pub fn perturb_with_basis(images: &Tensor, basis: &Tensor, signs: &[f64]) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[2] != s[3] || basis.shape() != [s[2], s[3]] || signs.len() != s[0] {
        return Err(config(format!(
            "basis {:?} with {} signs does not fit images {s:?}",
            basis.shape(),
            signs.len()
        )));
    }
    let (c, hw) = (s[1], s[2] * s[3]);
    Ok(Tensor::from_fn(s.to_vec(), |k| {
        let sample = k / (c * hw);
        (images.data()[k] + signs[sample] * basis.data()[k % hw]).clamp(0.0, 1.0)
    }))
}

/// Cell `(i, j)` is the error rate on `data` after adding the signed
/// `(i, j)` basis of norm `v` to each image. `seed` fixes the signs.
pub fn fourier_heatmap(net: &dyn Network, data: &LabeledImageSet, v: f64, batch: usize, seed: u64) -> Result<FourierHeatmap> {
    let shape = data.image_shape();
    if shape[1] != shape[2] {
        return Err(config(format!("heatmaps need square images, got {shape:?}")));
    }
    if data.is_empty() {
        return Err(config("heatmap needs at least one sample"));
    }
    let n = shape[1];
    let idx: Vec<usize> = (0..data.len()).collect();
    let batches: Vec<(usize, Tensor, Vec<usize>)> = idx
        .chunks(batch.max(1))
        .map(|chunk| data.batch(chunk).map(|(x, y)| (chunk[0], x, y)))
        .collect::<Result<_>>()?;
    let mut cells = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let basis = fourier_basis(&FourierBasisSpec { i, j, v, n })?;
            let mut wrong = 0usize;
            for (start, x, y) in &batches {
                let signs: Vec<f64> = (0..y.len()).map(|k| basis_sign(seed, start + k, i, j)).collect();
                let pred = predict(net, &perturb_with_basis(x, &basis, &signs)?)?;
                wrong += pred.iter().zip(y).filter(|(p, t)| p != t).count();
            }
            cells[i * n + j] = wrong as f64 / data.len() as f64;
        }
    }
    Ok(FourierHeatmap {
        side: n,
        cells,
        norm_v: v,
        sample_count: data.len(),
    })
}
