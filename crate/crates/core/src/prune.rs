//! Global unstructured magnitude pruning with exact sparsity accounting.

use crate::attack::{robust_accuracy, Attack};
use crate::data::LabeledImageSet;
use crate::error::{config, Result};
use crate::nn::{Network, ParamKind, ParamStore};
use crate::train::accuracy;

/// Keep-masks for every prunable (weight-kind) parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneMask {
    /// `(parameter index, keep flags)` in store order.
    pub masks: Vec<(usize, Vec<bool>)>,
    pub target_fraction: f64,
    pub total_prunable: usize,
    pub achieved_nonzero: usize,
}

impl PruneMask {
    /// Re-applies the mask, zeroing every dropped entry.
    pub fn apply(&self, params: &mut ParamStore) {
        for (id, keep) in &self.masks {
            for (v, &k) in params.value_mut(*id).data_mut().iter_mut().zip(keep) {
                if !k {
                    *v = 0.0;
                }
            }
        }
    }
}

pub fn prunable_count(params: &ParamStore) -> usize {
    params.iter().filter(|p| p.kind == ParamKind::Weight).map(|p| p.value.numel()).sum()
}

/// Weight entries that are not exactly zero.
pub fn nonzero_weights(params: &ParamStore) -> usize {
    params
        .iter()
        .filter(|p| p.kind == ParamKind::Weight)
        .map(|p| p.value.data().iter().filter(|&&v| v != 0.0).count())
        .sum()
}

/// Zeros the `floor(fraction · n)` smallest-magnitude entries across all
/// weight tensors. Ties keep (parameter, index) order, so earlier entries
/// are pruned first. Biases, norms and positional tables are never touched.
pub fn magnitude_prune(params: &mut ParamStore, fraction: f64) -> Result<PruneMask> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(config(format!("prune fraction {fraction} outside [0, 1]")));
    }
    let mut entries: Vec<(f64, usize, usize)> = Vec::new();
    let mut masks = Vec::new();
    for (id, p) in params.iter().enumerate() {
        if p.kind != ParamKind::Weight {
            continue;
        }
        entries.extend(p.value.data().iter().enumerate().map(|(k, v)| (v.abs(), masks.len(), k)));
        masks.push((id, vec![true; p.value.numel()]));
    }
    let total = entries.len();
    let drop = ((fraction * total as f64).floor() as usize).min(total);
    // Stable sort keeps construction order among equal magnitudes.
    entries.sort_by(|a, b| a.0.total_cmp(&b.0));
    for &(_, m, k) in &entries[..drop] {
        masks[m].1[k] = false;
    }
    let mask = PruneMask {
        masks,
        target_fraction: fraction,
        total_prunable: total,
        achieved_nonzero: total - drop,
    };
    mask.apply(params);
    Ok(mask)
}

/// Clone of `net` pruned at `fraction`.
pub fn pruned<N: Network + Clone>(net: &N, fraction: f64) -> Result<(N, PruneMask)> {
    let mut copy = net.clone();
    let mask = magnitude_prune(copy.params_mut(), fraction)?;
    Ok((copy, mask))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub fraction: f64,
    pub clean_accuracy: f64,
    pub robust_accuracy: Option<f64>,
    pub nonzero: usize,
    pub total_prunable: usize,
}

/// Evaluates clean (and optionally robust) accuracy at each pruning level.
/// No fine-tuning happens between pruning and evaluation.
pub fn sparsity_sweep<N: Network + Clone>(
    net: &N,
    fractions: &[f64],
    data: &LabeledImageSet,
    attack: Option<&Attack>,
    batch: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if fractions.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(config("prune fractions must be sorted ascending"));
    }
    fractions
        .iter()
        .map(|&f| {
            let (model, mask) = pruned(net, f)?;
            let clean_accuracy = accuracy(&model, data, batch)?;
            let robust = match attack {
                Some(a) => Some(robust_accuracy(&model, data, std::slice::from_ref(a), batch, seed)?.worst),
                None => None,
            };
            Ok(SweepRow {
                fraction: f,
                clean_accuracy,
                robust_accuracy: robust,
                nonzero: mask.achieved_nonzero,
                total_prunable: mask.total_prunable,
            })
        })
        .collect()
}
