//! Named rows of the structure grid.
//!
//! `(a)`..`(n)` walk from the plain OriViT/VMLP towards the fully
//! convolution-augmented image-pyramid model; `(1)`..`(24)` are the
//! norm/skip ablations over the OriViT stacking.

use super::spec::{Cmlp, Embedding, Family, Norm, Skip, Stacking, StructureSpec, TokenMixer};
use crate::error::{Error, Result};

pub const TABLE_PRESETS: [&str; 14] = [
    "(a)", "(b)", "(c)", "(d)", "(e)", "(f)", "(g)", "(h)", "(i)", "(j)", "(k)", "(l)", "(m)", "(n)",
];

pub fn ablation_presets() -> Vec<String> {
    (1..=24).map(|i| format!("({i})")).collect()
}

pub fn all_preset_ids() -> Vec<String> {
    TABLE_PRESETS
        .iter()
        .map(|s| s.to_string())
        .chain(ablation_presets())
        .collect()
}

fn table_row(id: &str) -> Option<(Embedding, TokenMixer, Cmlp, Norm, Stacking)> {
    use Cmlp as C;
    use Embedding as E;
    use Norm::{LayerNorm as Ln, None as NoNorm};
    use Stacking as S;
    use TokenMixer as T;
    Some(match id {
        "(a)" => (E::Ori, T::Ori, C::Ori, NoNorm, S::OriVit),
        "(b)" => (E::Ori, T::Ori, C::Ori, Ln, S::OriVit),
        "(c)" => (E::Ori, T::Ori, C::Conv, NoNorm, S::OriVit),
        "(d)" => (E::Ori, T::Ori, C::Conv, Ln, S::OriVit),
        "(e)" => (E::Conv, T::Ori, C::Ori, NoNorm, S::OriVit),
        "(f)" => (E::Conv, T::Ori, C::Ori, Ln, S::OriVit),
        "(g)" => (E::Conv, T::Ori, C::Conv, NoNorm, S::OriVit),
        "(h)" => (E::Conv, T::Ori, C::Conv, Ln, S::OriVit),
        "(i)" => (E::Pconv, T::Conv, C::Ori, Ln, S::CnnBased),
        "(j)" => (E::Pconv, T::Conv, C::Conv, Ln, S::CnnBased),
        "(k)" => (E::Ori, T::WindowShift, C::Ori, Ln, S::SwinBased),
        "(l)" => (E::Pconv, T::WindowShift, C::Conv, Ln, S::SwinBased),
        // The pyramid stacking always embeds with PCONV.
        "(m)" => (E::Pconv, T::Ori, C::Ori, Ln, S::ImagePy),
        "(n)" => (E::Pconv, T::Conv, C::Conv, Ln, S::ImagePy),
        _ => return None,
    })
}

fn ablation_row(n: usize) -> Option<(Embedding, Cmlp, Norm, Skip)> {
    if !(1..=24).contains(&n) {
        return None;
    }
    let k = n - 1;
    let embedding = if k < 12 { Embedding::Ori } else { Embedding::Conv };
    let cmlp = [Cmlp::Ori, Cmlp::None, Cmlp::Conv][(k / 4) % 3];
    let (norm, skip) = [
        (Norm::LayerNorm, Skip::Residual),
        (Norm::LayerNorm, Skip::None),
        (Norm::None, Skip::Residual),
        (Norm::None, Skip::None),
    ][k % 4];
    Some((embedding, cmlp, norm, skip))
}

/// Resolves a preset id to its desk-scale spec.
pub fn structure_from_preset(id: &str, family: Family) -> Result<StructureSpec> {
    let id = id.trim();
    if let Some((e, t, c, n, s)) = table_row(id) {
        return Ok(StructureSpec::desk(family, e, t, c, n, Skip::Residual, s));
    }
    let ablation = id
        .strip_prefix('(')
        .and_then(|r| r.strip_suffix(')'))
        .and_then(|r| r.parse::<usize>().ok())
        .and_then(ablation_row);
    if let Some((e, c, n, k)) = ablation {
        return Ok(StructureSpec::desk(family, e, TokenMixer::Ori, c, n, k, Stacking::OriVit));
    }
    Err(Error::Usage(format!(
        "unknown preset `{id}`; valid ids: {}",
        all_preset_ids().join(", ")
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn original_vit_row() {
        let s = structure_from_preset("(b)", Family::Vit).unwrap();
        assert_eq!(
            (s.embedding, s.token_mixer, s.cmlp, s.norm, s.skip, s.stacking),
            (Embedding::Ori, TokenMixer::Ori, Cmlp::Ori, Norm::LayerNorm, Skip::Residual, Stacking::OriVit)
        );
        assert_eq!(s.stage_layers, vec![12]);
    }

    #[test]
    fn final_row_is_fully_convolutional_pyramid() {
        let s = structure_from_preset("(n)", Family::Vmlp).unwrap();
        assert_eq!(
            (s.embedding, s.token_mixer, s.cmlp, s.stacking),
            (Embedding::Pconv, TokenMixer::Conv, Cmlp::Conv, Stacking::ImagePy)
        );
        assert_eq!(s.stage_layers, vec![2, 2, 8]);
    }

    #[test]
    fn ablation_four_drops_norm_and_skip() {
        let s = structure_from_preset("(4)", Family::Vit).unwrap();
        assert_eq!((s.norm, s.skip, s.cmlp, s.embedding), (Norm::None, Skip::None, Cmlp::Ori, Embedding::Ori));
        let s = structure_from_preset("(21)", Family::Vit).unwrap();
        assert_eq!((s.norm, s.skip, s.cmlp, s.embedding), (Norm::LayerNorm, Skip::Residual, Cmlp::Conv, Embedding::Conv));
    }

    #[test]
    fn every_preset_uses_twelve_layers() {
        for id in all_preset_ids() {
            assert_eq!(structure_from_preset(&id, Family::Vit).unwrap().total_layers(), 12, "{id}");
        }
    }

    #[test]
    fn unknown_preset_lists_valid_ids() {
        let err = structure_from_preset("(z)", Family::Vit).unwrap_err().to_string();
        assert!(err.contains("(a)") && err.contains("(24)"), "{err}");
        assert!(structure_from_preset("(25)", Family::Vit).is_err());
    }
}
