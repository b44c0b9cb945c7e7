//! Index maps between image, grid and window layouts.
//!
//! All maps are permutations (or, for patchify, a bijective re-layout), so
//! both the plain-tensor and the taped versions are gathers over one
//! precomputed index vector.

use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{config, Result};
use crate::tensor::Tensor;

use super::spec::Grid;

/// Index map for `[B, C, H, W] -> [B, N, P*P*C]`, patches in row-major
/// order and each patch flattened as `(row, col, channel)`.
fn patchify_index(b: usize, c: usize, h: usize, w: usize, p: usize) -> Result<Vec<usize>> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(config(format!("image {h}x{w} is not divisible by patch {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for pi in 0..gh {
            for pj in 0..gw {
                for i in 0..p {
                    for j in 0..p {
                        for ch in 0..c {
                            idx.push(((bi * c + ch) * h + pi * p + i) * w + pj * p + j);
                        }
                    }
                }
            }
        }
    }
    Ok(idx)
}

fn image_dims(shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[b, c, h, w] => Ok([b, c, h, w]),
        other => Err(config(format!("expected an image batch [B, C, H, W], got {other:?}"))),
    }
}

/// `[B, C, H, W] -> [B, H*W/P^2, P*P*C]`.
pub fn patchify(x: &Tensor, patch: usize) -> Result<Tensor> {
    let [b, c, h, w] = image_dims(x.shape())?;
    let idx = patchify_index(b, c, h, w, patch)?;
    let n = (h / patch) * (w / patch);
    Tensor::new(vec![b, n, patch * patch * c], idx.iter().map(|&i| x.data()[i]).collect())
}

pub fn patchify_var<'t>(x: Var<'t>, patch: usize) -> Result<Var<'t>> {
    let [b, c, h, w] = image_dims(&x.shape())?;
    let idx = patchify_index(b, c, h, w, patch)?;
    let n = (h / patch) * (w / patch);
    x.gather(Rc::new(idx), &[b, n, patch * patch * c])
}

/// Window layout of a token grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Windows {
    pub grid: Grid,
    pub window: usize,
    pub shift: usize,
}

impl Windows {
    pub fn new(grid: Grid, window: usize, shift: usize) -> Result<Self> {
        if window == 0 || window > grid.h || window > grid.w {
            return Err(config(format!("window {window} exceeds the {}x{} grid", grid.h, grid.w)));
        }
        if grid.h % window != 0 || grid.w % window != 0 {
            return Err(config(format!("window {window} does not tile the {}x{} grid", grid.h, grid.w)));
        }
        if shift >= window {
            return Err(config(format!("shift {shift} must be smaller than window {window}")));
        }
        Ok(Windows { grid, window, shift })
    }

    pub fn count(&self) -> usize {
        (self.grid.h / self.window) * (self.grid.w / self.window)
    }

    /// For each (window, slot) position the source token index in the
    /// grid after a cyclic roll by `-shift` on both axes.
    fn token_map(&self) -> Vec<usize> {
        let Windows { grid, window: ws, shift } = *self;
        let mut map = Vec::with_capacity(grid.tokens());
        for wi in 0..grid.h / ws {
            for wj in 0..grid.w / ws {
                for i in 0..ws {
                    for j in 0..ws {
                        let r = (wi * ws + i + shift) % grid.h;
                        let c = (wj * ws + j + shift) % grid.w;
                        map.push(r * grid.w + c);
                    }
                }
            }
        }
        map
    }

    fn expand(&self, token_map: &[usize], batch: usize, dim: usize) -> Vec<usize> {
        let n = self.grid.tokens();
        let mut idx = Vec::with_capacity(batch * n * dim);
        for b in 0..batch {
            for &t in token_map {
                for d in 0..dim {
                    idx.push((b * n + t) * dim + d);
                }
            }
        }
        idx
    }

    fn partition_index(&self, batch: usize, dim: usize) -> Vec<usize> {
        self.expand(&self.token_map(), batch, dim)
    }

    fn merge_index(&self, batch: usize, dim: usize) -> Vec<usize> {
        let forward = self.token_map();
        let mut inverse = vec![0; forward.len()];
        for (slot, &t) in forward.iter().enumerate() {
            inverse[t] = slot;
        }
        self.expand(&inverse, batch, dim)
    }

    fn check_tokens(&self, shape: &[usize]) -> Result<(usize, usize)> {
        match shape {
            &[b, n, d] if n == self.grid.tokens() => Ok((b, d)),
            other => Err(config(format!(
                "expected tokens [B, {}, d] for a {}x{} grid, got {other:?}",
                self.grid.tokens(),
                self.grid.h,
                self.grid.w
            ))),
        }
    }

    /// `[B, N, d] -> [B * windows, window^2, d]`.
    pub fn partition(&self, z: &Tensor) -> Result<Tensor> {
        let (b, d) = self.check_tokens(z.shape())?;
        let idx = self.partition_index(b, d);
        Tensor::new(
            vec![b * self.count(), self.window * self.window, d],
            idx.iter().map(|&i| z.data()[i]).collect(),
        )
    }

    /// Inverse of [`Windows::partition`].
    pub fn merge(&self, windows: &Tensor) -> Result<Tensor> {
        let (b, d) = self.check_windows(windows.shape())?;
        let idx = self.merge_index(b, d);
        Tensor::new(vec![b, self.grid.tokens(), d], idx.iter().map(|&i| windows.data()[i]).collect())
    }

    fn check_windows(&self, shape: &[usize]) -> Result<(usize, usize)> {
        match shape {
            &[bw, n, d] if n == self.window * self.window && bw % self.count() == 0 => Ok((bw / self.count(), d)),
            other => Err(config(format!("window tensor {other:?} does not match layout {self:?}"))),
        }
    }

    pub fn partition_var<'t>(&self, z: Var<'t>) -> Result<Var<'t>> {
        let (b, d) = self.check_tokens(&z.shape())?;
        z.gather(
            Rc::new(self.partition_index(b, d)),
            &[b * self.count(), self.window * self.window, d],
        )
    }

    pub fn merge_var<'t>(&self, windows: Var<'t>) -> Result<Var<'t>> {
        let (b, d) = self.check_windows(&windows.shape())?;
        windows.gather(Rc::new(self.merge_index(b, d)), &[b, self.grid.tokens(), d])
    }
}

/// Partitions a token grid into (optionally shifted) windows.
pub fn window_partition_shift(z: &Tensor, grid: Grid, window: usize, shift: usize) -> Result<Tensor> {
    Windows::new(grid, window, shift)?.partition(z)
}

/// Inverse of [`window_partition_shift`].
pub fn window_merge_unshift(windows: &Tensor, grid: Grid, window: usize, shift: usize) -> Result<Tensor> {
    Windows::new(grid, window, shift)?.merge(windows)
}

/// Tokens `[B, N, d]` to a channels-first map `[B, d, h, w]`.
pub fn tokens_to_map<'t>(z: Var<'t>, grid: Grid) -> Result<Var<'t>> {
    let s = z.shape();
    if s.len() != 3 || s[1] != grid.tokens() {
        return Err(config(format!("tokens {s:?} do not match a {}x{} grid", grid.h, grid.w)));
    }
    z.reshape(&[s[0], grid.h, grid.w, s[2]])?.permute(&[0, 3, 1, 2])
}

/// Channels-first map `[B, d, h, w]` to tokens `[B, h*w, d]`.
pub fn map_to_tokens<'t>(m: Var<'t>) -> Result<Var<'t>> {
    let s = m.shape();
    if s.len() != 4 {
        return Err(config(format!("expected a feature map [B, d, h, w], got {s:?}")));
    }
    m.permute(&[0, 2, 3, 1])?.reshape(&[s[0], s[2] * s[3], s[1]])
}

/// Space-to-depth on tokens: each 2x2 neighbourhood becomes one token of
/// width `4d`, ordered (top-left, top-right, bottom-left, bottom-right).
pub fn merge_patches<'t>(z: Var<'t>, grid: Grid) -> Result<Var<'t>> {
    let s = z.shape();
    if s.len() != 3 || s[1] != grid.tokens() || grid.h % 2 != 0 || grid.w % 2 != 0 {
        return Err(config(format!("cannot merge 2x2 patches of {s:?} on a {}x{} grid", grid.h, grid.w)));
    }
    let (b, d) = (s[0], s[2]);
    let (h2, w2) = (grid.h / 2, grid.w / 2);
    let mut idx = Vec::with_capacity(b * grid.tokens() * d);
    for bi in 0..b {
        for i in 0..h2 {
            for j in 0..w2 {
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let t = (2 * i + di) * grid.w + 2 * j + dj;
                    for c in 0..d {
                        idx.push((bi * grid.tokens() + t) * d + c);
                    }
                }
            }
        }
    }
    z.gather(Rc::new(idx), &[b, h2 * w2, 4 * d])
}
