//! Small reference classifiers used by tests, oracles and quick experiments.

use super::layers::{Ctx, Linear};
use super::params::{ParamInit, ParamKind, ParamStore};
use super::Network;
use crate::autograd::Var;
use crate::error::{config, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

fn flatten<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    let b = s[0];
    x.reshape(&[b, s[1..].iter().product()])
}

/// Affine map of the flattened input: `logits = flat(x) W + b`.
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    params: ParamStore,
    layer: Linear,
    classes: usize,
}

impl LinearClassifier {
    pub fn new(input_dim: usize, classes: usize, seed: u64, weight_std: f64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = seeded(seed);
        let mut init = ParamInit {
            store: &mut params,
            rng: &mut rng,
            weight_std,
        };
        let layer = Linear::new(&mut init, "linear", input_dim, classes)?;
        Ok(LinearClassifier { params, layer, classes })
    }

    /// `weight` is `[input_dim, classes]`, `bias` is `[classes]`.
    pub fn from_weights(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(config(format!(
                "linear classifier weight {:?} / bias {:?} disagree",
                weight.shape(),
                bias.shape()
            )));
        }
        let classes = weight.shape()[1];
        let mut params = ParamStore::new();
        let w = params.add("linear.weight", ParamKind::Weight, weight)?;
        let b = params.add("linear.bias", ParamKind::Bias, bias)?;
        Ok(LinearClassifier {
            params,
            layer: Linear { weight: w, bias: b },
            classes,
        })
    }
}

impl Network for LinearClassifier {
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn num_classes(&self) -> usize {
        self.classes
    }
    fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        self.layer.forward(ctx, flatten(x)?)
    }
}

/// Two-layer perceptron with a GELU hidden layer.
#[derive(Clone, Debug)]
pub struct MlpClassifier {
    params: ParamStore,
    hidden: Linear,
    out: Linear,
    classes: usize,
}

impl MlpClassifier {
    pub fn new(input_dim: usize, hidden: usize, classes: usize, seed: u64, weight_std: f64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = seeded(seed);
        let mut init = ParamInit {
            store: &mut params,
            rng: &mut rng,
            weight_std,
        };
        let h = Linear::new(&mut init, "hidden", input_dim, hidden)?;
        let o = Linear::new(&mut init, "out", hidden, classes)?;
        Ok(MlpClassifier {
            params,
            hidden: h,
            out: o,
            classes,
        })
    }
}

impl Network for MlpClassifier {
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn num_classes(&self) -> usize {
        self.classes
    }
    fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.hidden.forward(ctx, flatten(x)?)?.gelu();
        self.out.forward(ctx, h)
    }
}

/// Emits the same logits for every input.
#[derive(Clone, Debug)]
pub struct ConstantClassifier {
    params: ParamStore,
    classes: usize,
}

impl ConstantClassifier {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        let classes = logits.len();
        let mut params = ParamStore::new();
        params.add("logits", ParamKind::Bias, Tensor::new([classes], logits)?)?;
        Ok(ConstantClassifier { params, classes })
    }
}

impl Network for ConstantClassifier {
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn num_classes(&self) -> usize {
        self.classes
    }
    fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        let b = x.shape()[0];
        ctx.tape.constant(Tensor::zeros([b, self.classes])).add(ctx.p(0))
    }
}
