use rand::Rng;

use super::params::ParamInit;
use crate::autograd::{Conv2dGeometry, Tape, Var};
use crate::error::Result;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// A tape plus the bound parameter handles of one forward pass.
pub struct Ctx<'a, 't> {
    pub tape: &'t Tape,
    pub params: &'a [Var<'t>],
}

impl<'t> Ctx<'_, 't> {
    pub fn p(&self, id: usize) -> Var<'t> {
        self.params[id]
    }
}

/// `y = x W + b` over the last axis; `W` is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn new<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Linear {
            weight: init.weight(&format!("{name}.weight"), &[input, output])?,
            bias: init.bias(&format!("{name}.bias"), output)?,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(ctx.p(self.weight))?.add(ctx.p(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: usize,
    pub bias: usize,
    pub geometry: Conv2dGeometry,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        init: &mut ParamInit<'_, R>,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        Ok(Conv2dLayer {
            weight: init.weight(&format!("{name}.weight"), &[output, input / groups, kernel, kernel])?,
            bias: init.bias(&format!("{name}.bias"), output)?,
            geometry: Conv2dGeometry {
                stride: (stride, stride),
                padding: (padding, padding),
                groups,
            },
        })
    }

    /// Kernel 3, stride 1, zero padding 1: the shape-preserving default.
    pub fn same3<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, input: usize, output: usize) -> Result<Self> {
        Self::new(init, name, input, output, 3, 1, 1, 1)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d_general(ctx.p(self.weight), Some(ctx.p(self.bias)), self.geometry)
    }
}

#[derive(Clone, Debug)]
pub struct Conv1dLayer {
    pub weight: usize,
    pub bias: usize,
    pub padding: usize,
}

impl Conv1dLayer {
    /// Kernel 3, stride 1, zero padding 1.
    pub fn same3<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Conv1dLayer {
            weight: init.weight(&format!("{name}.weight"), &[output, input, 3])?,
            bias: init.bias(&format!("{name}.bias"), output)?,
            padding: 1,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv1d(ctx.p(self.weight), Some(ctx.p(self.bias)), 1, self.padding, 1)
    }
}

/// Layer normalisation over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
}

impl LayerNorm {
    pub fn new<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, dim: usize) -> Result<Self> {
        let (gamma, beta) = init.norm(name, dim)?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(ctx.p(self.gamma), ctx.p(self.beta), LAYER_NORM_EPS)
    }
}
