//! Instantiation of a [`StructureSpec`] as a trainable classifier.
//!
//! Activations travel between blocks as tokens `[B, N, d]` laid out over a
//! row-major grid; convolutional pieces convert to `[B, d, h, w]` and back
//! locally. Every convolutional replacement of a linear projection is a
//! depthwise 3x3 (or width-3 along the sequence for 1-D tokens) followed
//! by a pointwise projection, so a CONV variant keeps the parameter budget
//! of its linear counterpart.

use rand::Rng;

use super::spec::{Cmlp, Embedding, Family, Grid, Norm, Skip, Stacking, StructureSpec, TokenMixer};
use super::tokens::{map_to_tokens, merge_patches, patchify_var, tokens_to_map, Windows};
use crate::autograd::{Conv2dGeometry, Tape, Var};
use crate::error::{config, Result};
use crate::nn::{Conv2dLayer, Ctx, LayerNorm, Linear, Network, ParamInit, ParamStore};
use crate::rng::seeded;
use crate::tensor::Tensor;

pub const DEFAULT_WEIGHT_STD: f64 = 0.02;

/// Channels of the hidden layer in the convolutional embedding stem.
const STEM_WIDTH: usize = 16;

/// A stem convolution with He-scaled weights, `std = sqrt(2 / fan_in)`.
///
/// At the shared 0.02 scale the two stem layers shrink the image by about
/// three orders of magnitude before the patch projection, and the
/// resulting gradients fall below Adam's epsilon.
fn stem_conv<R: rand::Rng>(init: &mut ParamInit<'_, R>, name: &str, input: usize, output: usize) -> Result<Conv2dLayer> {
    let shared = init.weight_std;
    init.weight_std = (2.0 / (9 * input) as f64).sqrt();
    let layer = Conv2dLayer::same3(init, name, input, output);
    init.weight_std = shared;
    layer
}

/// Per-channel affine input normalisation `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputNorm {
    pub fn identity(channels: usize) -> Self {
        InputNorm {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.mean.iter().all(|&m| m == 0.0) && self.std.iter().all(|&s| s == 1.0)
    }

    fn apply<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        if self.is_identity() {
            return Ok(x);
        }
        let s = x.shape();
        let (c, hw) = (s[1], s[2] * s[3]);
        if c != self.mean.len() {
            return Err(config(format!("input has {c} channels, normaliser expects {}", self.mean.len())));
        }
        let shift = tape.constant(Tensor::from_fn([c, s[2], s[3]], |i| -self.mean[i / hw]));
        let scale = tape.constant(Tensor::from_fn([c, s[2], s[3]], |i| 1.0 / self.std[i / hw]));
        x.add(shift)?.mul(scale)
    }
}

/// Intermediate activations captured during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    /// Embedding output as tokens `[B, N, d]`.
    pub embedded: Option<Tensor>,
    /// Output of every token-mixer block, in depth order.
    pub layers: Vec<Tensor>,
    /// Attention maps `[groups, n, n]` of every attention block; one group
    /// per (sample, window, head).
    pub attention: Vec<Tensor>,
}

/// Depthwise spatial (or sequence) filter followed by a pointwise map.
#[derive(Clone, Debug)]
struct SepConv {
    dw_weight: usize,
    dw_bias: usize,
    pointwise: Linear,
}

/// Token layout a convolution sees.
#[derive(Clone, Copy, Debug)]
enum Layout {
    Sequence,
    Spatial(Grid),
}

fn depthwise<'t>(ctx: &Ctx<'_, 't>, z: Var<'t>, weight: usize, bias: usize, layout: Layout) -> Result<Var<'t>> {
    let d = z.shape()[2];
    match layout {
        Layout::Sequence => {
            let y = z.permute(&[0, 2, 1])?.conv1d(ctx.p(weight), Some(ctx.p(bias)), 1, 1, d)?;
            y.permute(&[0, 2, 1])
        }
        Layout::Spatial(grid) => {
            let geo = Conv2dGeometry {
                stride: (1, 1),
                padding: (1, 1),
                groups: d,
            };
            map_to_tokens(tokens_to_map(z, grid)?.conv2d_general(ctx.p(weight), Some(ctx.p(bias)), geo)?)
        }
    }
}

fn depthwise_params<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, dim: usize, layout: Layout) -> Result<(usize, usize)> {
    let shape: Vec<usize> = match layout {
        Layout::Sequence => vec![dim, 1, 3],
        Layout::Spatial(_) => vec![dim, 1, 3, 3],
    };
    Ok((init.weight(&format!("{name}.weight"), &shape)?, init.bias(&format!("{name}.bias"), dim)?))
}

impl SepConv {
    fn new<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, input: usize, output: usize, layout: Layout) -> Result<Self> {
        let (dw_weight, dw_bias) = depthwise_params(init, &format!("{name}.dw"), input, layout)?;
        let pointwise = Linear::new(init, &format!("{name}.pw"), input, output)?;
        Ok(SepConv {
            dw_weight,
            dw_bias,
            pointwise,
        })
    }

    fn forward<'t>(&self, ctx: &Ctx<'_, 't>, z: Var<'t>, layout: Layout) -> Result<Var<'t>> {
        let y = depthwise(ctx, z, self.dw_weight, self.dw_bias, layout)?;
        self.pointwise.forward(ctx, y)
    }
}

/// A token-wise projection: plain linear, or its convolutional swap.
#[derive(Clone, Debug)]
enum Proj {
    Linear(Linear),
    Conv(SepConv),
}

impl Proj {
    fn new<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, input: usize, output: usize, conv: Option<Layout>) -> Result<Self> {
        Ok(match conv {
            None => Proj::Linear(Linear::new(init, name, input, output)?),
            Some(layout) => Proj::Conv(SepConv::new(init, name, input, output, layout)?),
        })
    }

    fn forward<'t>(&self, ctx: &Ctx<'_, 't>, z: Var<'t>, layout: Layout) -> Result<Var<'t>> {
        match self {
            Proj::Linear(l) => l.forward(ctx, z),
            Proj::Conv(c) => c.forward(ctx, z, layout),
        }
    }
}

#[derive(Clone, Debug)]
enum Mixer {
    Attention { q: Proj, k: Proj, v: Proj, o: Proj, heads: usize },
    /// Token-mixing MLP applied along the token axis of each window.
    TokenMlp { fc1: Linear, fc2: Linear },
    /// Two depthwise 3x3 filters around a GELU.
    SpatialConv { w1: usize, b1: usize, w2: usize, b2: usize },
}

#[derive(Clone, Debug)]
struct ChannelMlp {
    fc1: Proj,
    fc2: Proj,
}

/// One token-mixer layer: `z' = skip(z, TM(norm(z)))`, then
/// `z'' = skip(z', MLP(norm(z')))`.
#[derive(Clone, Debug)]
struct Block {
    norm1: Option<LayerNorm>,
    mixer: Mixer,
    norm2: Option<LayerNorm>,
    mlp: Option<ChannelMlp>,
    layout: Layout,
    /// `None` means global mixing.
    windows: Option<Windows>,
    residual: bool,
}

impl Block {
    fn build<R: Rng>(init: &mut ParamInit<'_, R>, spec: &StructureSpec, stage: usize, index: usize, name: &str) -> Result<Self> {
        let dim = spec.stage_dim(stage);
        let grid = spec.stage_grid(stage);
        let layout = if spec.stacking == Stacking::OriVit {
            Layout::Sequence
        } else {
            Layout::Spatial(grid)
        };
        let side = grid.h.min(grid.w);
        let windows = match (spec.token_mixer, spec.stacking) {
            (TokenMixer::WindowShift, _) => {
                let w = spec.stage_window(stage);
                let shift = if index % 2 == 1 && w < side { w / 2 } else { 0 };
                Some(Windows::new(grid, w, shift)?)
            }
            (_, Stacking::ImagePy) if spec.pyramid_block() < side => Some(Windows::new(grid, spec.pyramid_block(), 0)?),
            _ => None,
        };
        let window_tokens = windows.map_or(grid.tokens(), |w| w.window * w.window);
        let ln = |init: &mut ParamInit<'_, R>, n: &str| -> Result<Option<LayerNorm>> {
            match spec.norm {
                Norm::LayerNorm => Ok(Some(LayerNorm::new(init, &format!("{name}.{n}"), dim)?)),
                Norm::None => Ok(None),
            }
        };
        let norm1 = ln(init, "norm1")?;
        let conv_tm = (spec.token_mixer == TokenMixer::Conv).then_some(layout);
        let mixer = match spec.family {
            Family::Vit => Mixer::Attention {
                q: Proj::new(init, &format!("{name}.attn.q"), dim, dim, conv_tm)?,
                k: Proj::new(init, &format!("{name}.attn.k"), dim, dim, conv_tm)?,
                v: Proj::new(init, &format!("{name}.attn.v"), dim, dim, conv_tm)?,
                o: Proj::new(init, &format!("{name}.attn.o"), dim, dim, conv_tm)?,
                heads: spec.heads,
            },
            Family::Vmlp if conv_tm.is_some() => {
                let (w1, b1) = depthwise_params(init, &format!("{name}.mix.dw1"), dim, layout)?;
                let (w2, b2) = depthwise_params(init, &format!("{name}.mix.dw2"), dim, layout)?;
                Mixer::SpatialConv { w1, b1, w2, b2 }
            }
            Family::Vmlp => {
                let hidden = (window_tokens / 2).max(1);
                Mixer::TokenMlp {
                    fc1: Linear::new(init, &format!("{name}.mix.fc1"), window_tokens, hidden)?,
                    fc2: Linear::new(init, &format!("{name}.mix.fc2"), hidden, window_tokens)?,
                }
            }
        };
        let (norm2, mlp) = match spec.cmlp {
            Cmlp::None => (None, None),
            kind => {
                let conv = (kind == Cmlp::Conv).then_some(layout);
                let hidden = spec.mlp_hidden(dim);
                let norm2 = ln(init, "norm2")?;
                let mlp = ChannelMlp {
                    fc1: Proj::new(init, &format!("{name}.mlp.fc1"), dim, hidden, conv)?,
                    fc2: Proj::new(init, &format!("{name}.mlp.fc2"), hidden, dim, conv)?,
                };
                (norm2, Some(mlp))
            }
        };
        Ok(Block {
            norm1,
            mixer,
            norm2,
            mlp,
            layout,
            windows,
            residual: spec.skip == Skip::Residual,
        })
    }

    fn partition<'t>(&self, z: Var<'t>) -> Result<Var<'t>> {
        match &self.windows {
            Some(w) => w.partition_var(z),
            None => Ok(z),
        }
    }

    fn merge<'t>(&self, z: Var<'t>) -> Result<Var<'t>> {
        match &self.windows {
            Some(w) => w.merge_var(z),
            None => Ok(z),
        }
    }

    fn mix<'t>(&self, ctx: &Ctx<'_, 't>, z: Var<'t>, trace: &mut Option<&mut Trace>) -> Result<Var<'t>> {
        match &self.mixer {
            Mixer::Attention { q, k, v, o, heads } => {
                let q = self.partition(q.forward(ctx, z, self.layout)?)?;
                let k = self.partition(k.forward(ctx, z, self.layout)?)?;
                let v = self.partition(v.forward(ctx, z, self.layout)?)?;
                let s = q.shape();
                let (groups, n, d) = (s[0], s[1], s[2]);
                let dh = d / heads;
                let split = |t: Var<'t>| -> Result<Var<'t>> {
                    t.reshape(&[groups, n, *heads, dh])?
                        .permute(&[0, 2, 1, 3])?
                        .reshape(&[groups * heads, n, dh])
                };
                let (q, k, v) = (split(q)?, split(k)?, split(v)?);
                let scores = q.matmul(k.transpose()?)?.scale(1.0 / (dh as f64).sqrt());
                let attn = scores.softmax();
                if let Some(t) = trace.as_deref_mut() {
                    t.attention.push((*attn.value()).clone());
                }
                let y = attn
                    .matmul(v)?
                    .reshape(&[groups, *heads, n, dh])?
                    .permute(&[0, 2, 1, 3])?
                    .reshape(&[groups, n, d])?;
                o.forward(ctx, self.merge(y)?, self.layout)
            }
            Mixer::TokenMlp { fc1, fc2 } => {
                let w = self.partition(z)?.transpose()?;
                let h = fc1.forward(ctx, w)?.gelu();
                self.merge(fc2.forward(ctx, h)?.transpose()?)
            }
            Mixer::SpatialConv { w1, b1, w2, b2 } => {
                let h = depthwise(ctx, z, *w1, *b1, self.layout)?.gelu();
                depthwise(ctx, h, *w2, *b2, self.layout)
            }
        }
    }

    fn forward<'t>(&self, ctx: &Ctx<'_, 't>, z: Var<'t>, trace: &mut Option<&mut Trace>) -> Result<Var<'t>> {
        let n1 = match &self.norm1 {
            Some(n) => n.forward(ctx, z)?,
            None => z,
        };
        let m = self.mix(ctx, n1, trace)?;
        let z = if self.residual { z.add(m)? } else { m };
        let Some(mlp) = &self.mlp else { return Ok(z) };
        let n2 = match &self.norm2 {
            Some(n) => n.forward(ctx, z)?,
            None => z,
        };
        let h = mlp.fc1.forward(ctx, n2, self.layout)?.gelu();
        let h = mlp.fc2.forward(ctx, h, self.layout)?;
        if self.residual {
            z.add(h)
        } else {
            Ok(h)
        }
    }
}

/// Image-pyramid stage transition: shape-preserving 3x3 convolution to the
/// next width, optional channel norm, then 2x2 max-pooling.
#[derive(Clone, Debug)]
pub struct BlockAggregate {
    pub conv: Conv2dLayer,
    pub norm: Option<LayerNorm>,
}

impl BlockAggregate {
    pub fn new<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, input: usize, output: usize, norm: bool) -> Result<Self> {
        Ok(BlockAggregate {
            conv: Conv2dLayer::same3(init, &format!("{name}.conv"), input, output)?,
            norm: if norm {
                Some(LayerNorm::new(init, &format!("{name}.norm"), output)?)
            } else {
                None
            },
        })
    }

    /// `[B, d, s, s] -> [B, d', s/2, s/2]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, map: Var<'t>) -> Result<Var<'t>> {
        let s = map.shape();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(config(format!("block aggregation needs an even spatial side, got {s:?}")));
        }
        let y = self.conv.forward(ctx, map)?;
        let y = match &self.norm {
            Some(n) => {
                let ys = y.shape();
                let grid = Grid { h: ys[2], w: ys[3] };
                tokens_to_map(n.forward(ctx, map_to_tokens(y)?)?, grid)?
            }
            None => y,
        };
        y.max_pool2d(2, 2)
    }
}

#[derive(Clone, Debug)]
enum Transition {
    /// Stride-2 convolution to the doubled width, then norm.
    Strided { conv: Conv2dLayer, norm: Option<LayerNorm> },
    /// 2x2 patch merge, norm over the merged width, linear reduction.
    PatchMerge { norm: Option<LayerNorm>, proj: Linear },
    Aggregate(BlockAggregate),
}

impl Transition {
    fn forward<'t>(&self, ctx: &Ctx<'_, 't>, z: Var<'t>, grid: Grid) -> Result<Var<'t>> {
        let norm = |n: &Option<LayerNorm>, z: Var<'t>| match n {
            Some(n) => n.forward(ctx, z),
            None => Ok(z),
        };
        match self {
            Transition::Strided { conv, norm: n } => {
                let y = map_to_tokens(conv.forward(ctx, tokens_to_map(z, grid)?)?)?;
                norm(n, y)
            }
            Transition::PatchMerge { norm: n, proj } => {
                let y = norm(n, merge_patches(z, grid)?)?;
                proj.forward(ctx, y)
            }
            Transition::Aggregate(agg) => map_to_tokens(agg.forward(ctx, tokens_to_map(z, grid)?)?),
        }
    }
}

#[derive(Clone, Debug)]
struct Stage {
    grid: Grid,
    transition: Option<Transition>,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
enum EmbedKind {
    Ori { proj: Linear },
    Conv { stem: [Conv2dLayer; 2], proj: Linear },
    Pconv { conv: Conv2dLayer },
}

#[derive(Clone, Debug)]
enum HeadKind {
    Mlp { fc1: Linear, fc2: Linear },
    Conv { conv: SepConv, fc: Linear },
    Linear(Linear),
}

#[derive(Clone, Debug)]
struct Head {
    norm: Option<LayerNorm>,
    kind: HeadKind,
    layout: Layout,
}

/// A classifier built from a validated [`StructureSpec`].
#[derive(Clone, Debug)]
pub struct Model {
    spec: StructureSpec,
    params: ParamStore,
    input_norm: InputNorm,
    embed: EmbedKind,
    position: usize,
    stages: Vec<Stage>,
    head: Head,
}

impl Model {
    /// Builds with the default weight scale.
    pub fn new(spec: &StructureSpec, seed: u64) -> Result<Self> {
        Self::with_weight_std(spec, seed, DEFAULT_WEIGHT_STD)
    }

    pub fn with_weight_std(spec: &StructureSpec, seed: u64, weight_std: f64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut rng = seeded(seed);
        let mut init = ParamInit {
            store: &mut params,
            rng: &mut rng,
            weight_std,
        };
        let init = &mut init;
        let c = spec.image.channels;
        let d = spec.embed_dim;
        let p = spec.patch;
        let base = spec.base_grid();

        let embed = match spec.embedding {
            Embedding::Ori => EmbedKind::Ori {
                proj: Linear::new(init, "embed.proj", p * p * c, d)?,
            },
            Embedding::Conv => EmbedKind::Conv {
                stem: [
                    stem_conv(init, "embed.stem0", c, STEM_WIDTH)?,
                    stem_conv(init, "embed.stem1", STEM_WIDTH, c)?,
                ],
                proj: Linear::new(init, "embed.proj", p * p * c, d)?,
            },
            Embedding::Pconv => EmbedKind::Pconv {
                conv: Conv2dLayer::new(init, "embed.conv", c, d, p, p, 0, 1)?,
            },
        };
        let position = match spec.embedding {
            Embedding::Pconv => init.position("embed.pos", &[d, base.h, base.w])?,
            _ => init.position("embed.pos", &[base.tokens(), d])?,
        };

        let with_norm = spec.norm == Norm::LayerNorm;
        let mut stages = Vec::with_capacity(spec.stage_layers.len());
        for (s, &layers) in spec.stage_layers.iter().enumerate() {
            let name = format!("stage{s}");
            let transition = if s == 0 {
                None
            } else {
                let (din, dout) = (spec.stage_dim(s - 1), spec.stage_dim(s));
                let norm = |init: &mut ParamInit<'_, _>, width: usize| -> Result<Option<LayerNorm>> {
                    if with_norm {
                        Ok(Some(LayerNorm::new(init, &format!("{name}.down.norm"), width)?))
                    } else {
                        Ok(None)
                    }
                };
                Some(match spec.stacking {
                    Stacking::CnnBased => Transition::Strided {
                        conv: Conv2dLayer::new(init, &format!("{name}.down.conv"), din, dout, 3, 2, 1, 1)?,
                        norm: norm(init, dout)?,
                    },
                    Stacking::SwinBased => Transition::PatchMerge {
                        norm: norm(init, 4 * din)?,
                        proj: Linear::new(init, &format!("{name}.down.proj"), 4 * din, dout)?,
                    },
                    Stacking::ImagePy => {
                        Transition::Aggregate(BlockAggregate::new(init, &format!("{name}.down"), din, dout, with_norm)?)
                    }
                    Stacking::OriVit => unreachable!("validated single stage"),
                })
            };
            let blocks = (0..layers)
                .map(|l| Block::build(init, spec, s, l, &format!("{name}.block{l}")))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage {
                grid: spec.stage_grid(s),
                transition,
                blocks,
            });
        }

        let last = spec.stage_layers.len() - 1;
        let dl = spec.stage_dim(last);
        let head_layout = if spec.stacking == Stacking::OriVit {
            Layout::Sequence
        } else {
            Layout::Spatial(spec.stage_grid(last))
        };
        let head = Head {
            norm: if with_norm {
                Some(LayerNorm::new(init, "head.norm", dl)?)
            } else {
                None
            },
            kind: match spec.cmlp {
                Cmlp::Ori => HeadKind::Mlp {
                    fc1: Linear::new(init, "head.fc1", dl, dl)?,
                    fc2: Linear::new(init, "head.fc2", dl, spec.classes)?,
                },
                Cmlp::Conv => HeadKind::Conv {
                    conv: SepConv::new(init, "head.conv", dl, dl, head_layout)?,
                    fc: Linear::new(init, "head.fc", dl, spec.classes)?,
                },
                Cmlp::None => HeadKind::Linear(Linear::new(init, "head.fc", dl, spec.classes)?),
            },
            layout: head_layout,
        };

        Ok(Model {
            spec: spec.clone(),
            params,
            input_norm: InputNorm::identity(c),
            embed,
            position,
            stages,
            head,
        })
    }

    pub fn spec(&self) -> &StructureSpec {
        &self.spec
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    pub fn input_norm(&self) -> &InputNorm {
        &self.input_norm
    }

    pub fn set_input_norm(&mut self, norm: InputNorm) -> Result<()> {
        if norm.mean.len() != self.spec.image.channels
            || norm.std.len() != self.spec.image.channels
            || norm.std.iter().any(|&s| !(s > 0.0))
        {
            return Err(config("input normaliser must give one mean and one positive std per channel"));
        }
        self.input_norm = norm;
        Ok(())
    }

    /// Embedding output: tokens `[B, N, d]` for Ori/Conv embeddings, a
    /// feature map `[B, d, H/P, W/P]` for PConv.
    pub fn embed<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        let pos = ctx.p(self.position);
        let projected = match &self.embed {
            EmbedKind::Ori { proj } => proj.forward(ctx, patchify_var(x, self.spec.patch)?)?,
            EmbedKind::Conv { stem, proj } => {
                let h = stem[0].forward(ctx, x)?.gelu();
                let h = stem[1].forward(ctx, h)?.gelu();
                proj.forward(ctx, patchify_var(h, self.spec.patch)?)?
            }
            EmbedKind::Pconv { conv } => conv.forward(ctx, x)?,
        };
        add_position(projected, pos)
    }

    /// Runs one token-mixer block of `stage` on tokens `z`.
    pub fn apply_block<'t>(&self, ctx: &Ctx<'_, 't>, stage: usize, index: usize, z: Var<'t>) -> Result<Var<'t>> {
        let block = self
            .stages
            .get(stage)
            .and_then(|s| s.blocks.get(index))
            .ok_or_else(|| config(format!("no block {index} in stage {stage}")))?;
        block.forward(ctx, z, &mut None)
    }

    /// Forward pass that optionally records intermediate activations.
    pub fn forward_traced<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>, mut trace: Option<&mut Trace>) -> Result<Var<'t>> {
        let s = x.shape();
        let img = self.spec.image;
        if s.len() != 4 || s[1..] != [img.channels, img.height, img.width] {
            return Err(config(format!(
                "expected images [B, {}, {}, {}], got {s:?}",
                img.channels, img.height, img.width
            )));
        }
        let x = self.input_norm.apply(ctx.tape, x)?;
        let mut z = self.embed(ctx, x)?;
        if matches!(self.embed, EmbedKind::Pconv { .. }) {
            z = map_to_tokens(z)?;
        }
        if let Some(t) = trace.as_deref_mut() {
            t.embedded = Some((*z.value()).clone());
        }
        let mut grid = self.spec.base_grid();
        for stage in &self.stages {
            if let Some(tr) = &stage.transition {
                z = tr.forward(ctx, z, grid)?;
            }
            grid = stage.grid;
            for block in &stage.blocks {
                z = block.forward(ctx, z, &mut trace)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.layers.push((*z.value()).clone());
                }
            }
        }
        self.head_forward(ctx, z)
    }

    fn head_forward<'t>(&self, ctx: &Ctx<'_, 't>, z: Var<'t>) -> Result<Var<'t>> {
        let z = match &self.head.norm {
            Some(n) => n.forward(ctx, z)?,
            None => z,
        };
        match &self.head.kind {
            HeadKind::Mlp { fc1, fc2 } => {
                let h = fc1.forward(ctx, z.mean_axis(1)?)?.gelu();
                fc2.forward(ctx, h)
            }
            HeadKind::Conv { conv, fc } => {
                let h = conv.forward(ctx, z, self.head.layout)?.gelu();
                fc.forward(ctx, h.mean_axis(1)?)
            }
            HeadKind::Linear(fc) => fc.forward(ctx, z.mean_axis(1)?),
        }
    }
}

/// Adds a learnable positional table, which must match the trailing
/// token (or feature-map) shape exactly.
pub fn add_position<'t>(z: Var<'t>, pos: Var<'t>) -> Result<Var<'t>> {
    let (zs, ps) = (z.shape(), pos.shape());
    if zs.len() != ps.len() + 1 || zs[1..] != ps[..] {
        return Err(config(format!("positional embedding {ps:?} does not match tokens {zs:?}")));
    }
    z.add(pos)
}

impl Network for Model {
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn num_classes(&self) -> usize {
        self.spec.classes
    }
    fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        self.forward_traced(ctx, x, None)
    }
}

/// Runs `model` on `x` and returns logits together with the trace.
pub fn trace_forward(model: &Model, x: &Tensor) -> Result<(Tensor, Trace)> {
    let tape = Tape::new();
    let params = model.params().bind(&tape, false);
    let ctx = Ctx { tape: &tape, params: &params };
    let mut trace = Trace::default();
    let out = model.forward_traced(&ctx, tape.constant(x.clone()), Some(&mut trace))?;
    Ok(((*out.value()).clone(), trace))
}
