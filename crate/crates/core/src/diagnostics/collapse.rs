use crate::error::{config, Result};
use crate::structure::{trace_forward, Model, StructureSpec};
use crate::tensor::Tensor;

/// `‖Z − 1·cᵀ‖_F / ‖Z‖_F` for a token matrix `Z` (`[N, d]`), where `c` holds
/// the column means. Zero exactly when all token rows coincide.
pub fn rank1_residual(z: &Tensor) -> Result<f64> {
    let &[n, d] = z.shape() else {
        return Err(config(format!("expected a token matrix [N, d], got {:?}", z.shape())));
    };
    let total: f64 = z.data().iter().map(|v| v * v).sum();
    if total == 0.0 {
        return Err(config("rank-1 residual of a zero matrix is undefined"));
    }
    let mut mean = vec![0.0; d];
    for row in z.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let resid: f64 = z
        .data()
        .chunks(d)
        .flat_map(|row| row.iter().zip(&mean).map(|(v, m)| (v - m).powi(2)))
        .sum();
    Ok((resid / total).sqrt())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median (over `seeds`) of the batch-mean rank-1 residual of the tokens
/// after each block of a model built from `spec`.
pub fn rank_collapse_profile(spec: &StructureSpec, x: &Tensor, seeds: &[u64], weight_std: f64) -> Result<Vec<f64>> {
    if seeds.is_empty() {
        return Err(config("collapse profile needs at least one seed"));
    }
    let depth = spec.total_layers();
    let mut per_depth = vec![Vec::with_capacity(seeds.len()); depth];
    for &seed in seeds {
        let model = Model::with_weight_std(spec, seed, weight_std)?;
        let (_, trace) = trace_forward(&model, x)?;
        for (l, z) in trace.layers.iter().enumerate() {
            let s = z.shape();
            let mut total = 0.0;
            for b in 0..s[0] {
                total += rank1_residual(&z.slice_outer(b, b + 1)?.reshape([s[1], s[2]])?)?;
            }
            per_depth[l].push(total / s[0] as f64);
        }
    }
    Ok(per_depth.into_iter().map(median).collect())
}
