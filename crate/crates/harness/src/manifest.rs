//! The experiment manifest: a TOML file validated in full before any
//! compute starts. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use robustlab_core::attack::{Attack, AttackSpec};
use robustlab_core::data::SyntheticFreqSpec;
use robustlab_core::diagnostics::{DEFAULT_HEATMAP_NORM, DEFAULT_HEATMAP_SAMPLES};
use robustlab_core::structure::{structure_from_preset, Family, Scale, StructureSpec};
use robustlab_core::train::OptimizerKind;
use serde::{Deserialize, Serialize};

use crate::fsutil::sha256_hex;

/// A manifest that does not parse or fails a schema check.
#[derive(Debug)]
pub struct ManifestError(pub String);

impl std::fmt::Display for ManifestError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid manifest: {}", self.0)
    }
}

impl std::error::Error for ManifestError {}

macro_rules! invalid {
    ($($arg:tt)*) => {
        return Err(ManifestError(format!($($arg)*)).into())
    };
}

fn one() -> usize {
    1
}

fn default_eval_batch() -> usize {
    64
}

fn default_test_count() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Master seed; every run derives its own seed from it.
    #[serde(default)]
    pub seed: u64,
    /// Independent training runs per structure.
    #[serde(default = "one")]
    pub replicates: usize,
    /// Output directory, relative to the manifest file.
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    pub dataset: DatasetConfig,
    pub structure: StructureConfig,
    pub train: TrainSection,
    #[serde(default)]
    pub attacks: Vec<Attack>,
    #[serde(default)]
    pub diagnostics: Diagnostics,
    #[serde(default)]
    pub prune: Option<PruneSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        #[serde(default)]
        synthetic: SyntheticFreqSpec,
        /// Size of the held-out set, generated from a seed derived from
        /// the training set's.
        #[serde(default = "default_test_count")]
        test_count: usize,
        /// Fit per-channel mean/std on the training set and apply them
        /// inside the model.
        #[serde(default)]
        normalize: bool,
    },
    Cifar10 {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
        #[serde(default)]
        limit_train: Option<usize>,
        #[serde(default)]
        limit_test: Option<usize>,
        #[serde(default)]
        normalize: bool,
    },
}

impl DatasetConfig {
    pub fn normalize(&self) -> bool {
        match self {
            DatasetConfig::Synthetic { normalize, .. } | DatasetConfig::Cifar10 { normalize, .. } => *normalize,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureConfig {
    #[serde(default = "default_family")]
    pub family: Family,
    /// Named grid rows, e.g. `"(b)"` or `"(17)"`.
    #[serde(default)]
    pub presets: Vec<String>,
    /// Applied to every preset (not to custom structures).
    #[serde(default)]
    pub scale: Scale,
    #[serde(default)]
    pub custom: Vec<NamedStructure>,
}

fn default_family() -> Family {
    Family::Vit
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedStructure {
    pub name: String,
    pub spec: StructureSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    #[serde(default)]
    pub adversarial: Option<AttackSpec>,
}

fn default_lr() -> f64 {
    1e-3
}

impl TrainSection {
    pub fn mode(&self) -> &'static str {
        match &self.adversarial {
            Some(a) if a.epsilon > 0.0 => "adversarial",
            _ => "standard",
        }
    }

    pub fn config(&self, seed: u64) -> robustlab_core::train::TrainConfig {
        robustlab_core::train::TrainConfig {
            optimizer: self.optimizer,
            lr: self.lr,
            epochs: self.epochs,
            batch: self.batch,
            seed,
            adversarial: self.adversarial.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diagnostics {
    pub heatmap: Option<HeatmapSection>,
    pub lipschitz: Option<LipschitzSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatmapSection {
    /// ℓ2 norm of each Fourier perturbation, in pixel units.
    pub norm: f64,
    pub samples: usize,
    /// Pixels per cell in the rendered image.
    pub pixel_scale: usize,
}

impl Default for HeatmapSection {
    fn default() -> Self {
        HeatmapSection {
            norm: DEFAULT_HEATMAP_NORM,
            samples: DEFAULT_HEATMAP_SAMPLES,
            pixel_scale: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LipschitzSection {
    pub epsilon: f64,
    pub steps: usize,
    pub restarts: usize,
    pub samples: usize,
}

impl Default for LipschitzSection {
    fn default() -> Self {
        LipschitzSection {
            epsilon: 8.0 / 255.0,
            steps: 50,
            restarts: 3,
            samples: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSection {
    pub fractions: Vec<f64>,
    /// Also evaluate robust accuracy under every configured attack.
    #[serde(default)]
    pub robust: bool,
}

/// One structure to train, as resolved from the manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedStructure {
    pub label: String,
    pub spec: StructureSpec,
}

/// A parsed manifest together with its provenance.
#[derive(Clone, Debug)]
pub struct LoadedManifest {
    pub manifest: Manifest,
    pub sha256: String,
    /// Directory relative paths in the manifest are resolved against.
    pub base_dir: PathBuf,
}

impl Manifest {
    /// Parses without touching the filesystem or validating structures.
    pub fn parse(text: &str) -> Result<Manifest> {
        toml::from_str(text).map_err(|e| {
            let msg = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
            ManifestError(msg).into()
        })
    }

    pub fn load(path: &Path) -> Result<LoadedManifest> {
        let bytes = std::fs::read(path).with_context(|| format!("reading manifest {}", path.display()))?;
        let text = std::str::from_utf8(&bytes).context("manifest is not UTF-8")?;
        let manifest = Manifest::parse(text)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(LoadedManifest {
            manifest,
            sha256: sha256_hex(&bytes),
            base_dir,
        })
    }

    /// Checks every setting and resolves the structure list. Structure
    /// errors carry the violated rule.
    pub fn validate(&self) -> Result<Vec<ResolvedStructure>> {
        if self.replicates == 0 {
            invalid!("replicates must be at least 1");
        }
        if self.eval_batch == 0 {
            invalid!("eval_batch must be at least 1");
        }
        self.train.config(self.seed).validate().map_err(|e| ManifestError(e.to_string()))?;
        for a in &self.attacks {
            match a {
                Attack::Fgsm { epsilon } if !(*epsilon >= 0.0) => invalid!("fgsm epsilon must be non-negative"),
                Attack::Fgsm { .. } => {}
                Attack::Pgd(s) | Attack::SquareLite { spec: s, .. } => {
                    s.validate().map_err(|e| ManifestError(e.to_string()))?
                }
            }
        }
        if let Some(h) = &self.diagnostics.heatmap {
            if !(h.norm >= 0.0) || h.samples == 0 || h.pixel_scale == 0 {
                invalid!("heatmap needs a non-negative norm and positive samples and pixel_scale");
            }
        }
        if let Some(l) = &self.diagnostics.lipschitz {
            if !(l.epsilon > 0.0) || l.restarts == 0 || l.samples == 0 {
                invalid!("lipschitz needs a positive epsilon, restarts and samples");
            }
        }
        if let Some(p) = &self.prune {
            if p.fractions.is_empty() || p.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
                invalid!("prune fractions must be a non-empty list in [0, 1]");
            }
            if p.fractions.windows(2).any(|w| !(w[0] <= w[1])) {
                invalid!("prune fractions must be sorted ascending");
            }
        }
        if let DatasetConfig::Synthetic { test_count: 0, .. } = self.dataset {
            invalid!("test_count must be at least 1");
        }
        self.structures()
    }

    /// Presets first (in manifest order), then custom structures.
    pub fn structures(&self) -> Result<Vec<ResolvedStructure>> {
        let s = &self.structure;
        if s.presets.is_empty() && s.custom.is_empty() {
            invalid!("list at least one preset or custom structure");
        }
        let mut out = Vec::new();
        for id in &s.presets {
            let spec = structure_from_preset(id, s.family)?.rescaled(&s.scale);
            out.push(ResolvedStructure {
                label: id.trim().to_string(),
                spec,
            });
        }
        for c in &s.custom {
            out.push(ResolvedStructure {
                label: c.name.clone(),
                spec: c.spec.clone(),
            });
        }
        for (i, r) in out.iter().enumerate() {
            if out[..i].iter().any(|o| o.label == r.label) {
                invalid!("structure `{}` listed twice", r.label);
            }
            r.spec.validate().with_context(|| format!("structure `{}`", r.label))?;
        }
        Ok(out)
    }
}
