//! Standard and adversarial (min-max) training with deterministic data
//! order and bit-exact checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{Checkpoint, RngState, StoredTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{Optimizer, OptimizerKind};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attack::{pgd, AttackSpec};
use crate::data::LabeledImageSet;
use crate::error::{config, Error, Result};
use crate::nn::{parameter_gradients, Network};
use crate::rng::{derive_seed, seeded, Rng64};
use crate::tensor::Tensor;

fn default_lr() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Inner maximisation; `None` trains on clean inputs.
    #[serde(default)]
    pub adversarial: Option<AttackSpec>,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch: usize, seed: u64) -> Self {
        TrainConfig {
            optimizer: OptimizerKind::default(),
            lr: default_lr(),
            epochs,
            batch,
            seed,
            adversarial: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch == 0 {
            return Err(config("batch size must be at least 1"));
        }
        self.optimizer.validate()?;
        if let Some(a) = &self.adversarial {
            a.validate()?;
        }
        Ok(())
    }
}

/// Optimizer, data-order rng and progress counters of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub optimizer: Optimizer,
    rng: Rng64,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, net: &dyn Network) -> Result<Self> {
        config.validate()?;
        let optimizer = Optimizer::new(config.optimizer, config.lr, net.params())?;
        let rng = seeded(derive_seed(config.seed, &[0x0da7a]));
        Ok(Trainer {
            config,
            optimizer,
            rng,
            epoch: 0,
            step: 0,
        })
    }

    /// One outer update on a batch. With an adversarial config the batch is
    /// first replaced by PGD adversaries computed against the current
    /// weights; the weight gradients always come from a fresh forward pass.
    ///
    /// A non-finite loss or gradient leaves the parameters untouched.
    pub fn train_step(&mut self, net: &mut dyn Network, x: &Tensor, y: &[usize]) -> Result<f64> {
        if y.is_empty() {
            return Err(config("empty training batch"));
        }
        let adv;
        let input = match &self.config.adversarial {
            Some(spec) if spec.epsilon > 0.0 => {
                adv = pgd(&*net, x, y, spec, derive_seed(self.config.seed, &[0xad7, self.step as u64]))?;
                &adv
            }
            _ => x,
        };
        let (loss, grads) = parameter_gradients(&*net, input, y)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        self.optimizer.step(net.params_mut(), &grads)?;
        self.step += 1;
        Ok(loss)
    }

    /// Trains the remaining epochs and returns one loss per step taken.
    pub fn fit(&mut self, net: &mut dyn Network, data: &LabeledImageSet) -> Result<Vec<f64>> {
        self.fit_with(net, data, |_, _| Ok(()))
    }

    /// As [`Trainer::fit`], calling `on_epoch` after every completed epoch
    /// (for example to write a checkpoint).
    pub fn fit_with(
        &mut self,
        net: &mut dyn Network,
        data: &LabeledImageSet,
        mut on_epoch: impl FnMut(&Trainer, &dyn Network) -> Result<()>,
    ) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(config("empty training set"));
        }
        let mut history = Vec::new();
        while self.epoch < self.config.epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.config.batch) {
                let (x, y) = data.batch(chunk)?;
                history.push(self.train_step(net, &x, &y)?);
            }
            self.epoch += 1;
            on_epoch(self, &*net)?;
        }
        Ok(history)
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    /// Snapshot of the run; `spec_json` describes how to rebuild the network.
    pub fn checkpoint(&self, net: &dyn Network, spec_json: &str, manifest_sha256: &str) -> Checkpoint {
        Checkpoint::capture(self, net, spec_json, manifest_sha256)
    }

    /// Restores parameters into `net` and returns a trainer positioned
    /// exactly where the checkpoint was taken.
    pub fn resume(config: TrainConfig, net: &mut dyn Network, ckpt: &Checkpoint) -> Result<Self> {
        let mut trainer = Trainer::new(config, net)?;
        ckpt.restore_params(net)?;
        ckpt.restore_optimizer(&mut trainer.optimizer, net)?;
        trainer.rng = ckpt.rng.restore();
        trainer.epoch = ckpt.epoch as usize;
        trainer.step = ckpt.step as usize;
        Ok(trainer)
    }
}

/// Fraction of samples whose arg-max prediction equals the label.
pub fn accuracy(net: &dyn Network, data: &LabeledImageSet, batch: usize) -> Result<f64> {
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let pred = crate::nn::predict(net, &x)?;
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}
