//! ℓ∞ adversaries: FGSM, multi-restart PGD that keeps the best iterate,
//! and a gradient-free random-square search.
//!
//! Every adversary returned here lies in the ε-ball around its input and
//! in the pixel range `[0, 1]`. Attacks see raw pixels; any dataset
//! normalisation lives inside the model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledImageSet;
use crate::error::{config, Result};
use crate::nn::{argmax_rows, input_gradient, logits, per_sample_loss, Network};
use crate::rng::{derive_seed, seeded, Rng64};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackInit {
    Clean,
    UniformInBall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub restarts: usize,
    pub init: AttackInit,
}

impl AttackSpec {
    /// Inner maximisation used during adversarial training on CIFAR-scale
    /// inputs: ε = 8/255, 10 steps of 0.01, one restart from the clean point.
    pub fn training_default() -> Self {
        AttackSpec {
            epsilon: 8.0 / 255.0,
            steps: 10,
            step_size: 0.01,
            restarts: 1,
            init: AttackInit::Clean,
        }
    }

    /// Evaluation budget: as for training, with five restarts.
    pub fn evaluation_default(epsilon: f64) -> Self {
        AttackSpec {
            epsilon,
            restarts: 5,
            ..Self::training_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(config(format!("epsilon {} must be a finite non-negative number", self.epsilon)));
        }
        if self.steps > 0 && !(self.step_size > 0.0) {
            return Err(config("step_size must be positive when steps > 0"));
        }
        if self.restarts == 0 {
            return Err(config("restarts must be at least 1"));
        }
        Ok(())
    }
}

/// `sign(0) = 0`, so coordinates with a zero gradient stay put.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects `v` onto the ε-ball around `x0` intersected with `[0, 1]`.
fn project(v: f64, x0: f64, eps: f64) -> f64 {
    v.clamp(x0 - eps, x0 + eps).clamp(0.0, 1.0)
}

fn check_batch(x: &Tensor, y: &[usize]) -> Result<()> {
    if x.rank() < 2 || x.shape()[0] != y.len() {
        return Err(config(format!("{} labels for a batch of shape {:?}", y.len(), x.shape())));
    }
    Ok(())
}

/// One signed-gradient step of size ε from `x`.
pub fn fgsm(net: &dyn Network, x: &Tensor, y: &[usize], epsilon: f64) -> Result<Tensor> {
    check_batch(x, y)?;
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let g = input_gradient(net, x, y)?.grad;
    Ok(Tensor::from_fn(x.shape().to_vec(), |i| {
        let x0 = x.data()[i];
        project(x0 + epsilon * sign(g.data()[i]), x0, epsilon)
    }))
}

fn samples(x: &Tensor) -> (usize, usize) {
    let b = x.shape()[0];
    (b, x.numel() / b)
}

/// Copies sample `i` of `src` into `dst` wherever `take[i]` holds.
fn copy_rows(dst: &mut Tensor, src: &Tensor, take: &[bool]) {
    let per = src.numel() / take.len();
    for (i, _) in take.iter().enumerate().filter(|(_, &t)| t) {
        dst.data_mut()[i * per..(i + 1) * per].copy_from_slice(&src.data()[i * per..(i + 1) * per]);
    }
}

fn uniform_start(x: &Tensor, eps: f64, rng: &mut Rng64) -> Tensor {
    Tensor::from_fn(x.shape().to_vec(), |i| {
        let v = x.data()[i];
        project(v + rng.gen_range(-eps..=eps), v, eps)
    })
}

/// Projected gradient ascent on the per-sample loss. The result is, per
/// sample, the highest-loss point among every iterate of every restart
/// (the clean input included when `init` is `Clean`).
///
/// Restart `r` draws its randomness from `derive_seed(seed, [r])`, so a
/// run with more restarts evaluates a superset of the candidates of a run
/// with fewer. With `init = Clean` the first restart starts at `x` and the
/// rest start uniformly in the ball.
pub fn pgd(net: &dyn Network, x: &Tensor, y: &[usize], spec: &AttackSpec, seed: u64) -> Result<Tensor> {
    spec.validate()?;
    check_batch(x, y)?;
    if spec.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let (b, _) = samples(x);
    let mut best = x.clone();
    let mut best_loss = vec![f64::NEG_INFINITY; b];
    for r in 0..spec.restarts {
        let mut rng = seeded(derive_seed(seed, &[r as u64]));
        let mut cur = if r == 0 && spec.init == AttackInit::Clean {
            x.clone()
        } else {
            uniform_start(x, spec.epsilon, &mut rng)
        };
        for t in 0..=spec.steps {
            let (losses, grad) = if t < spec.steps {
                let g = input_gradient(net, &cur, y)?;
                (g.losses, Some(g.grad))
            } else {
                (per_sample_loss(net, &cur, y)?, None)
            };
            let improved: Vec<bool> = losses.iter().zip(&best_loss).map(|(l, bl)| l > bl).collect();
            for (i, &l) in losses.iter().enumerate() {
                if improved[i] {
                    best_loss[i] = l;
                }
            }
            copy_rows(&mut best, &cur, &improved);
            let Some(g) = grad else { break };
            cur = Tensor::from_fn(x.shape().to_vec(), |i| {
                project(cur.data()[i] + spec.step_size * sign(g.data()[i]), x.data()[i], spec.epsilon)
            });
        }
    }
    Ok(best)
}

/// Side of the square proposed at query `q` of `total`: starts near a
/// quarter of the image area and halves its area at eight even steps.
fn square_side(q: usize, total: usize, h: usize, w: usize) -> usize {
    let phase = (8 * q) / total.max(1);
    let frac = 0.25 * 0.5f64.powi(phase as i32);
    ((frac * (h * w) as f64).sqrt().round() as usize).clamp(1, h.min(w))
}

/// Random-search attack using forward passes only. Each query overwrites a
/// random square of the current perturbation with a per-channel ±ε pattern
/// and keeps it only where the loss strictly increases.
pub fn square_lite(
    net: &dyn Network,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
    queries: usize,
    rng: &mut Rng64,
) -> Result<Tensor> {
    spec.validate()?;
    check_batch(x, y)?;
    if queries == 0 {
        return Err(config("square search needs at least one query"));
    }
    if x.rank() != 4 {
        return Err(config(format!("square search needs image batches [B, C, H, W], got {:?}", x.shape())));
    }
    let &[b, c, h, w] = x.shape() else { unreachable!() };
    let eps = spec.epsilon;
    let mut cur = match spec.init {
        AttackInit::Clean => x.clone(),
        AttackInit::UniformInBall => uniform_start(x, eps, rng),
    };
    if eps == 0.0 {
        return Ok(cur);
    }
    let mut cur_loss = per_sample_loss(net, &cur, y)?;
    for q in 0..queries {
        let side = square_side(q, queries, h, w);
        let mut cand = cur.clone();
        for bi in 0..b {
            let (r0, c0) = (rng.gen_range(0..=h - side), rng.gen_range(0..=w - side));
            for ch in 0..c {
                let s = if rng.gen::<bool>() { eps } else { -eps };
                for r in r0..r0 + side {
                    for col in c0..c0 + side {
                        let i = ((bi * c + ch) * h + r) * w + col;
                        cand.data_mut()[i] = project(x.data()[i] + s, x.data()[i], eps);
                    }
                }
            }
        }
        let loss = per_sample_loss(net, &cand, y)?;
        let better: Vec<bool> = loss.iter().zip(&cur_loss).map(|(a, b)| a > b).collect();
        copy_rows(&mut cur, &cand, &better);
        for (i, ok) in better.iter().enumerate() {
            if *ok {
                cur_loss[i] = loss[i];
            }
        }
    }
    Ok(cur)
}

/// An attack configuration evaluated by [`robust_accuracy`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Attack {
    Fgsm { epsilon: f64 },
    Pgd(AttackSpec),
    SquareLite { spec: AttackSpec, queries: usize },
}

impl Attack {
    pub fn epsilon(&self) -> f64 {
        match self {
            Attack::Fgsm { epsilon } => *epsilon,
            Attack::Pgd(s) | Attack::SquareLite { spec: s, .. } => s.epsilon,
        }
    }

    pub fn run(&self, net: &dyn Network, x: &Tensor, y: &[usize], seed: u64) -> Result<Tensor> {
        match self {
            Attack::Fgsm { epsilon } => fgsm(net, x, y, *epsilon),
            Attack::Pgd(spec) => pgd(net, x, y, spec, seed),
            Attack::SquareLite { spec, queries } => square_lite(net, x, y, spec, *queries, &mut seeded(seed)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustReport {
    pub clean: f64,
    /// One entry per attack, in the order given.
    pub per_attack: Vec<f64>,
    /// Fraction correct under every attack at once.
    pub worst: f64,
}

/// A sample counts as robust to an attack when both the clean input and
/// the adversary are classified correctly.
pub fn robust_accuracy(
    net: &dyn Network,
    set: &LabeledImageSet,
    attacks: &[Attack],
    batch_size: usize,
    seed: u64,
) -> Result<RobustReport> {
    if set.is_empty() || batch_size == 0 {
        return Err(config("robust accuracy needs a non-empty set and a positive batch size"));
    }
    let n = set.len();
    let mut clean = 0usize;
    let mut per = vec![0usize; attacks.len()];
    let mut worst = 0usize;
    let indices: Vec<usize> = (0..n).collect();
    for (bi, chunk) in indices.chunks(batch_size).enumerate() {
        let (x, y) = set.batch(chunk)?;
        let clean_ok: Vec<bool> = argmax_rows(&logits(net, &x)?).iter().zip(&y).map(|(p, t)| p == t).collect();
        let mut all_ok = clean_ok.clone();
        for (ai, attack) in attacks.iter().enumerate() {
            let adv = attack.run(net, &x, &y, derive_seed(seed, &[bi as u64, ai as u64]))?;
            let pred = argmax_rows(&logits(net, &adv)?);
            for i in 0..y.len() {
                let ok = clean_ok[i] && pred[i] == y[i];
                per[ai] += ok as usize;
                all_ok[i] &= ok;
            }
        }
        clean += clean_ok.iter().filter(|&&o| o).count();
        worst += all_ok.iter().filter(|&&o| o).count();
    }
    let frac = |k: usize| k as f64 / n as f64;
    Ok(RobustReport {
        clean: frac(clean),
        per_attack: per.into_iter().map(frac).collect(),
        worst: frac(worst),
    })
}
