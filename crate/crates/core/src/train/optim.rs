use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerKind {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerKind::Sgd { momentum } => (0.0..1.0).contains(&momentum),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer with per-parameter buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Number of updates applied so far.
    pub t: u64,
    /// Momentum (SGD) or first moment (Adam).
    pub first: Vec<Tensor>,
    /// Second moment (Adam only; empty for SGD).
    pub second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamStore) -> Result<Self> {
        kind.validate()?;
        if !(lr > 0.0) {
            return Err(config(format!("learning rate {lr} must be positive")));
        }
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect::<Vec<_>>();
        let second = match kind {
            OptimizerKind::Adam { .. } => zeros(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Ok(Optimizer {
            kind,
            lr,
            t: 0,
            first: zeros(),
            second,
        })
    }

    /// Applies one update with `grads` given in store order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(config(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let lr = self.lr;
        for (i, g) in grads.iter().enumerate() {
            let w = params.value_mut(i);
            if w.shape() != g.shape() {
                return Err(config(format!("gradient {:?} for parameter {:?}", g.shape(), w.shape())));
            }
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    let v = self.first[i].data_mut();
                    for ((wj, vj), gj) in w.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                        *vj = momentum * *vj + gj;
                        *wj -= lr * *vj;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.t as i32);
                    let c2 = 1.0 - beta2.powi(self.t as i32);
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for (j, wj) in w.data_mut().iter_mut().enumerate() {
                        let gj = g.data()[j];
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                        *wj -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
