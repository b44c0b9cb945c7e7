//! Parameters, layers and the [`Network`] abstraction every attack,
//! trainer and diagnostic works against.

mod layers;
mod params;
mod toy;

pub use layers::{Conv1dLayer, Conv2dLayer, Ctx, LayerNorm, Linear, LAYER_NORM_EPS};
pub use params::{Param, ParamInit, ParamKind, ParamStore};
pub use toy::{ConstantClassifier, LinearClassifier, MlpClassifier};

use crate::autograd::{ops::cross_entropy_per_sample, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// A differentiable classifier over image batches `[B, C, H, W]`.
pub trait Network: Send + Sync {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn num_classes(&self) -> usize;
    /// Maps an input batch to `[B, K]` logits. `params` are the store's
    /// tensors bound on `tape`, in store order.
    fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>>;
}

/// Logits of a batch with no gradient bookkeeping.
pub fn logits(net: &dyn Network, x: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let params = net.params().bind(&tape, false);
    let ctx = Ctx { tape: &tape, params: &params };
    let out = net.forward(&ctx, tape.constant(x.clone()))?;
    Ok((*out.value()).clone())
}

pub fn predict(net: &dyn Network, x: &Tensor) -> Result<Vec<usize>> {
    Ok(argmax_rows(&logits(net, x)?))
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().unwrap();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Per-sample losses and the gradient of the mean loss w.r.t. the input.
pub struct InputGrad {
    pub logits: Tensor,
    pub losses: Vec<f64>,
    pub grad: Tensor,
}

pub fn input_gradient(net: &dyn Network, x: &Tensor, labels: &[usize]) -> Result<InputGrad> {
    let tape = Tape::new();
    let params = net.params().bind(&tape, false);
    let ctx = Ctx { tape: &tape, params: &params };
    let xv = tape.leaf(x.clone(), true);
    let out = net.forward(&ctx, xv)?;
    let loss = out.softmax_cross_entropy(labels)?;
    tape.backward(loss)?;
    let logits = (*out.value()).clone();
    Ok(InputGrad {
        losses: cross_entropy_per_sample(&logits, labels),
        logits,
        grad: xv.grad().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())),
    })
}

/// Mean loss and gradients for every parameter (store order).
pub fn parameter_gradients(net: &dyn Network, x: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let params = net.params().bind(&tape, true);
    let ctx = Ctx { tape: &tape, params: &params };
    let out = net.forward(&ctx, tape.constant(x.clone()))?;
    let loss = out.softmax_cross_entropy(labels)?;
    tape.backward(loss)?;
    let grads = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((loss.value().data()[0], grads))
}

pub fn per_sample_loss(net: &dyn Network, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    Ok(cross_entropy_per_sample(&logits(net, x)?, labels))
}
