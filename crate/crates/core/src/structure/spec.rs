use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Attention token mixer.
    Vit,
    /// MLP token mixer.
    Vmlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Embedding {
    /// Patchify, linear projection, positional add.
    Ori,
    /// Convolution stem in front of the `Ori` path.
    Conv,
    /// Strided convolution with kernel = stride = patch.
    Pconv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMixer {
    Ori,
    Conv,
    /// Window attention alternating with shifted-window attention.
    WindowShift,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cmlp {
    Ori,
    Conv,
    /// No MLP sub-blocks; the head is a single linear classifier.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    LayerNorm,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Skip {
    Residual,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stacking {
    OriVit,
    CnnBased,
    SwinBased,
    ImagePy,
}

impl Stacking {
    pub fn default_stage_layers(self) -> Vec<usize> {
        match self {
            Stacking::OriVit => vec![12],
            Stacking::CnnBased => vec![1, 2, 9],
            Stacking::SwinBased => vec![2, 2, 6, 2],
            Stacking::ImagePy => vec![2, 2, 8],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

fn default_window() -> usize {
    4
}

/// Full description of one architecture in the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureSpec {
    pub family: Family,
    pub embedding: Embedding,
    pub token_mixer: TokenMixer,
    pub cmlp: Cmlp,
    pub norm: Norm,
    pub skip: Skip,
    pub stacking: Stacking,
    pub stage_layers: Vec<usize>,
    pub image: ImageDims,
    pub patch: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub classes: usize,
    /// Attention window side for windowed token mixers.
    #[serde(default = "default_window")]
    pub window: usize,
}

/// Token-grid extent of one stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn tokens(self) -> usize {
        self.h * self.w
    }
}

pub mod rules {
    pub const ORIVIT_DIMENSION: &str = "oriViT-dimension";
    pub const CNN_FIXED_COMPONENTS: &str = "cnnBased-fixed-components";
    pub const SWIN_CONV_TM: &str = "swin-conv-token-mixer";
    pub const IMAGEPY_EMBEDDING: &str = "imagePy-embedding";
    pub const ORIVIT_SINGLE_STAGE: &str = "oriViT-single-stage";
    pub const PATCH_DIVISIBILITY: &str = "patch-divisibility";
    pub const HEAD_DIVISIBILITY: &str = "head-divisibility";
    pub const STAGE_LAYERS: &str = "stage-layers";
    pub const STAGE_RESOLUTION: &str = "stage-resolution";
    pub const WINDOW_SIZE: &str = "window-size";
    pub const POSITIVE_DIMS: &str = "positive-dims";
}

fn reject(rule: &'static str, reason: impl Into<String>) -> Error {
    Error::Incompatible {
        rule,
        reason: reason.into(),
    }
}

impl StructureSpec {
    /// Desk-scale defaults: 32x32x3 input, patch 4, d = 64, 4 heads,
    /// MLP ratio 4, 10 classes.
    pub fn desk(
        family: Family,
        embedding: Embedding,
        token_mixer: TokenMixer,
        cmlp: Cmlp,
        norm: Norm,
        skip: Skip,
        stacking: Stacking,
    ) -> Self {
        StructureSpec {
            family,
            embedding,
            token_mixer,
            cmlp,
            norm,
            skip,
            stacking,
            stage_layers: stacking.default_stage_layers(),
            image: ImageDims {
                height: 32,
                width: 32,
                channels: 3,
            },
            patch: 4,
            embed_dim: 64,
            heads: 4,
            mlp_ratio: 4.0,
            classes: 10,
            window: default_window(),
        }
    }

    /// Token grid entering the first stage.
    pub fn base_grid(&self) -> Grid {
        Grid {
            h: self.image.height / self.patch,
            w: self.image.width / self.patch,
        }
    }

    /// Grid of stage `s`: the spatial side halves at each transition.
    pub fn stage_grid(&self, stage: usize) -> Grid {
        let g = self.base_grid();
        Grid {
            h: g.h >> stage,
            w: g.w >> stage,
        }
    }

    /// Channel width of stage `s`: doubles at each transition.
    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn total_layers(&self) -> usize {
        self.stage_layers.iter().sum()
    }

    /// Window side used by windowed mixers in stage `s`.
    pub fn stage_window(&self, stage: usize) -> usize {
        let g = self.stage_grid(stage);
        self.window.min(g.h).min(g.w)
    }

    /// Block side for the image-pyramid stacking: constant across stages,
    /// equal to the last stage's grid side so the final stage is one block.
    pub fn pyramid_block(&self) -> usize {
        let last = self.stage_grid(self.stage_layers.len() - 1);
        last.h.min(last.w)
    }

    pub fn mlp_hidden(&self, dim: usize) -> usize {
        ((dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    /// Checks every compatibility and dimension rule; the error names the
    /// violated rule.
    pub fn validate(&self) -> Result<()> {
        use rules::*;
        match self.stacking {
            Stacking::OriVit => {
                if self.embedding == Embedding::Pconv || self.token_mixer == TokenMixer::Conv {
                    return Err(reject(
                        ORIVIT_DIMENSION,
                        "OriViT emits 1-D tokens, so PCONV embedding and CONV token mixer do not fit",
                    ));
                }
                if self.stage_layers.len() != 1 {
                    return Err(reject(ORIVIT_SINGLE_STAGE, "OriViT stacks a single stage"));
                }
            }
            Stacking::CnnBased => {
                if self.embedding != Embedding::Pconv || self.token_mixer != TokenMixer::Conv {
                    return Err(reject(
                        CNN_FIXED_COMPONENTS,
                        "CNN-based stacking fixes PCONV embedding and CONV token mixer",
                    ));
                }
            }
            Stacking::SwinBased => {
                if self.token_mixer == TokenMixer::Conv {
                    return Err(reject(SWIN_CONV_TM, "Swin-based stacking keeps a windowed, non-CONV token mixer"));
                }
            }
            Stacking::ImagePy => {
                if self.embedding != Embedding::Pconv {
                    return Err(reject(IMAGEPY_EMBEDDING, "image-pyramid stacking needs the 2-D PCONV embedding"));
                }
            }
        }

        let dims = [
            self.image.height,
            self.image.width,
            self.image.channels,
            self.patch,
            self.embed_dim,
            self.heads,
            self.classes,
            self.window,
        ];
        if dims.contains(&0) || !(self.mlp_ratio > 0.0) {
            return Err(reject(POSITIVE_DIMS, "all extents and the MLP ratio must be positive"));
        }
        if self.image.height % self.patch != 0 || self.image.width % self.patch != 0 {
            return Err(reject(
                PATCH_DIVISIBILITY,
                format!(
                    "image {}x{} is not divisible by patch {}",
                    self.image.height, self.image.width, self.patch
                ),
            ));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(reject(
                HEAD_DIVISIBILITY,
                format!("embed_dim {} is not divisible by {} heads", self.embed_dim, self.heads),
            ));
        }
        if self.stage_layers.is_empty() || self.stage_layers.contains(&0) {
            return Err(reject(STAGE_LAYERS, "stage_layers must be a non-empty list of positive counts"));
        }
        let base = self.base_grid();
        let halvings = 1usize << (self.stage_layers.len() - 1);
        if base.h % halvings != 0 || base.w % halvings != 0 {
            return Err(reject(
                STAGE_RESOLUTION,
                format!(
                    "token grid {}x{} cannot halve {} times",
                    base.h,
                    base.w,
                    self.stage_layers.len() - 1
                ),
            ));
        }
        let windowed = self.token_mixer == TokenMixer::WindowShift || self.stacking == Stacking::ImagePy;
        if windowed {
            for s in 0..self.stage_layers.len() {
                let g = self.stage_grid(s);
                let w = if self.token_mixer == TokenMixer::WindowShift {
                    self.stage_window(s)
                } else {
                    self.pyramid_block()
                };
                if g.h % w != 0 || g.w % w != 0 {
                    return Err(reject(
                        WINDOW_SIZE,
                        format!("window {w} does not tile the {}x{} grid of stage {s}", g.h, g.w),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Optional overrides that shrink or grow a preset while keeping its
/// component choices. Unset fields keep the preset's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scale {
    pub image: Option<ImageDims>,
    pub patch: Option<usize>,
    pub embed_dim: Option<usize>,
    pub heads: Option<usize>,
    pub mlp_ratio: Option<f64>,
    pub classes: Option<usize>,
    pub window: Option<usize>,
    /// Total block count, spread over as many stages as the stacking and
    /// the token grid allow (one block per stage first, extra blocks go to
    /// the last stage).
    pub depth: Option<usize>,
    /// Explicit per-stage block counts; takes precedence over `depth`.
    pub stage_layers: Option<Vec<usize>>,
}

impl StructureSpec {
    pub fn rescaled(&self, scale: &Scale) -> StructureSpec {
        let mut s = self.clone();
        if let Some(v) = scale.image {
            s.image = v;
        }
        s.patch = scale.patch.unwrap_or(s.patch);
        s.embed_dim = scale.embed_dim.unwrap_or(s.embed_dim);
        s.heads = scale.heads.unwrap_or(s.heads);
        s.mlp_ratio = scale.mlp_ratio.unwrap_or(s.mlp_ratio);
        s.classes = scale.classes.unwrap_or(s.classes);
        s.window = scale.window.unwrap_or(s.window);
        if let Some(layers) = &scale.stage_layers {
            s.stage_layers = layers.clone();
        } else if let Some(depth) = scale.depth {
            s.stage_layers = spread_depth(&s, depth);
        }
        s
    }
}

fn spread_depth(spec: &StructureSpec, depth: usize) -> Vec<usize> {
    if depth == 0 {
        return vec![0];
    }
    let stages = if spec.stacking == Stacking::OriVit || spec.patch == 0 {
        1
    } else {
        let g = spec.base_grid();
        let halvings = g.h.trailing_zeros().min(g.w.trailing_zeros()) as usize;
        let wanted = spec.stacking.default_stage_layers().len();
        wanted.min(depth).min(halvings + 1).max(1)
    };
    let mut layers = vec![1; stages];
    layers[stages - 1] += depth - stages;
    layers
}

/// Standalone form of [`StructureSpec::validate`].
pub fn validate_structure(spec: &StructureSpec) -> Result<()> {
    spec.validate()
}
