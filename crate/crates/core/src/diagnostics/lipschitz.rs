use rand::Rng;

use crate::autograd::Tape;
use crate::error::{config, Result};
use crate::nn::{logits, Ctx, Network};
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzEstimate {
    pub per_sample: Vec<f64>,
    pub mean: f64,
    pub epsilon: f64,
    pub steps: usize,
    pub restarts: usize,
}

/// Estimator settings: signed ascent with step `epsilon / 10`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LipschitzConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for LipschitzConfig {
    fn default() -> Self {
        LipschitzConfig {
            epsilon: 8.0 / 255.0,
            steps: 50,
            restarts: 3,
            seed: 0,
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Lower bound on `max ‖f(x + δ) − f(x)‖₁ / ‖δ‖∞` over `0 < ‖δ‖∞ ≤ ε`,
/// found by signed gradient ascent on the ratio from uniform random starts.
///
/// The ball is not intersected with the pixel range: the quantity is a
/// property of the function around `x`, not of valid images.
pub fn local_lipschitz(net: &dyn Network, x: &Tensor, cfg: &LipschitzConfig) -> Result<LipschitzEstimate> {
    if !(cfg.epsilon > 0.0) || cfg.restarts == 0 {
        return Err(config("Lipschitz estimation needs epsilon > 0 and at least one restart"));
    }
    let b = x.shape()[0];
    let per = x.numel() / b;
    let base = logits(net, x)?;
    let k = base.numel() / b;
    let alpha = cfg.epsilon / 10.0;
    let mut best = vec![0.0f64; b];

    for r in 0..cfg.restarts {
        let mut rng = seeded(derive_seed(cfg.seed, &[r as u64]));
        let mut delta: Vec<f64> = (0..x.numel()).map(|_| rng.gen_range(-1.0..=1.0) * cfg.epsilon).collect();
        for t in 0..=cfg.steps {
            let tape = Tape::new();
            let params = net.params().bind(&tape, false);
            let ctx = Ctx { tape: &tape, params: &params };
            let moved = Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i] + delta[i]);
            let xv = tape.leaf(moved, true);
            let out = net.forward(&ctx, xv)?;
            let diff: Vec<f64> = out.value().data().iter().zip(base.data()).map(|(a, b)| a - b).collect();
            let signs = tape.constant(Tensor::new(out.shape(), diff.iter().map(|&d| sign(d)).collect())?);
            // Σ_samples ‖f(x+δ) − f(x)‖₁, whose input gradient separates by sample.
            let l1 = out.mul(signs)?.sum();
            let mut ratios = vec![0.0; b];
            let mut dmax = vec![0.0; b];
            let mut argmax = vec![0usize; b];
            for s in 0..b {
                let num: f64 = diff[s * k..(s + 1) * k].iter().map(|d| d.abs()).sum();
                let (am, dm) = delta[s * per..(s + 1) * per]
                    .iter()
                    .enumerate()
                    .fold((0, 0.0f64), |acc, (i, d)| if d.abs() > acc.1 { (i, d.abs()) } else { acc });
                dmax[s] = dm;
                argmax[s] = am;
                ratios[s] = if dm > 0.0 { num / dm } else { 0.0 };
                if ratios[s] > best[s] {
                    best[s] = ratios[s];
                }
            }
            if t == cfg.steps {
                break;
            }
            tape.backward(l1)?;
            let g = xv.grad().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
            for s in 0..b {
                if dmax[s] == 0.0 {
                    continue;
                }
                let off = s * per;
                for i in 0..per {
                    // d/dδ (N/D) = ∇N/D − N ∇D/D², with ∇D = sign(δ_k) e_k at the max coordinate.
                    let mut gr = g.data()[off + i] / dmax[s];
                    if i == argmax[s] {
                        gr -= ratios[s] * sign(delta[off + i]) / dmax[s];
                    }
                    let d = &mut delta[off + i];
                    *d = (*d + alpha * sign(gr)).clamp(-cfg.epsilon, cfg.epsilon);
                }
            }
        }
    }
    let mean = best.iter().sum::<f64>() / b as f64;
    Ok(LipschitzEstimate {
        per_sample: best,
        mean,
        epsilon: cfg.epsilon,
        steps: cfg.steps,
        restarts: cfg.restarts,
    })
}

/// Exact `max ‖W s‖₁` over sign vectors `s ∈ {±1}^n`, for `W` given as
/// `[n, k]` (input-major, as [`crate::nn::LinearClassifier`] stores it).
/// For a linear map this is the supremum of the ratio above.
pub fn linear_lipschitz_bound(weight: &Tensor) -> Result<f64> {
    let &[n, k] = weight.shape() else {
        return Err(config("expected a 2-D weight"));
    };
    if n > 24 {
        return Err(config(format!("{n} inputs is too many for vertex enumeration")));
    }
    let mut best = 0.0f64;
    for mask in 0u32..(1 << n) {
        let total: f64 = (0..k)
            .map(|c| {
                (0..n)
                    .map(|r| {
                        let s = if mask >> r & 1 == 1 { 1.0 } else { -1.0 };
                        s * weight.data()[r * k + c]
                    })
                    .sum::<f64>()
                    .abs()
            })
            .sum();
        best = best.max(total);
    }
    Ok(best)
}
