//! Result tables. Column order is part of the format and only changes
//! together with [`SCHEMA_VERSION`].

use anyhow::Result;
use robustlab_core::attack::Attack;

pub const SCHEMA_VERSION: u32 = 1;

pub const RESULT_COLUMNS: [&str; 19] = [
    "schema_version",
    "manifest_sha256",
    "preset",
    "family",
    "mode",
    "replicate",
    "seed",
    "parameter_count",
    "final_loss",
    "clean_accuracy",
    "robust_accuracy",
    "attacks",
    "per_attack_accuracy",
    "lipschitz_mean",
    "lipschitz_max",
    "heatmap_high_freq_error",
    "input_mean",
    "input_std",
    "error",
];

pub const PRUNE_COLUMNS: [&str; 11] = [
    "schema_version",
    "manifest_sha256",
    "preset",
    "replicate",
    "seed",
    "fraction",
    "nonzero",
    "total_prunable",
    "clean_accuracy",
    "robust_accuracy",
    "error",
];

pub const TIMING_COLUMNS: [&str; 5] = ["preset", "replicate", "train_seconds", "eval_seconds", "total_seconds"];

/// Fixed-point text with six significant digits. Non-finite values print
/// as `nan`, `inf` or `-inf`.
pub fn sig6(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() { "nan".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0.00000".into();
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    let text = format!("{v:.decimals$}");
    // Rounding can carry into a new leading digit (9.999995 -> 10.00000).
    let digits = text.chars().filter(|c| c.is_ascii_digit()).skip_while(|&c| c == '0').count();
    if digits > 6 && decimals > 0 {
        format!("{v:.prec$}", prec = decimals - 1)
    } else {
        text
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(sig6).unwrap_or_default()
}

fn joined(values: &[f64]) -> String {
    values.iter().map(|&v| sig6(v)).collect::<Vec<_>>().join(";")
}

/// Short, stable description of an attack for the `attacks` column.
pub fn attack_label(a: &Attack) -> String {
    match a {
        Attack::Fgsm { epsilon } => format!("fgsm@{}", sig6(*epsilon)),
        Attack::Pgd(s) => format!("pgd{}x{}@{}", s.steps, s.restarts, sig6(s.epsilon)),
        Attack::SquareLite { spec, queries } => format!("square{queries}@{}", sig6(spec.epsilon)),
    }
}

/// One row of `results.csv`: a (structure, replicate, training mode).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentRecord {
    pub preset: String,
    pub family: String,
    pub mode: String,
    pub replicate: usize,
    pub seed: u64,
    pub parameter_count: Option<usize>,
    pub final_loss: Option<f64>,
    pub clean_accuracy: Option<f64>,
    /// Accuracy under all attacks at once.
    pub robust_accuracy: Option<f64>,
    pub attacks: Vec<String>,
    pub per_attack_accuracy: Vec<f64>,
    pub lipschitz_mean: Option<f64>,
    pub lipschitz_max: Option<f64>,
    pub heatmap_high_freq_error: Option<f64>,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub error: Option<String>,
    /// Kept out of `results.csv` so that reruns are byte-identical; see
    /// `timings.csv`.
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

fn finish(mut w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.flush()?;
    Ok(w.into_inner().map_err(|e| anyhow::anyhow!("csv buffer: {e}"))?)
}

pub fn results_csv(manifest_sha256: &str, rows: &[ExperimentRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RESULT_COLUMNS)?;
    for r in rows {
        w.write_record([
            SCHEMA_VERSION.to_string(),
            manifest_sha256.to_string(),
            r.preset.clone(),
            r.family.clone(),
            r.mode.clone(),
            r.replicate.to_string(),
            r.seed.to_string(),
            r.parameter_count.map(|c| c.to_string()).unwrap_or_default(),
            opt(r.final_loss),
            opt(r.clean_accuracy),
            opt(r.robust_accuracy),
            r.attacks.join(";"),
            joined(&r.per_attack_accuracy),
            opt(r.lipschitz_mean),
            opt(r.lipschitz_max),
            opt(r.heatmap_high_freq_error),
            joined(&r.input_mean),
            joined(&r.input_std),
            r.error.clone().unwrap_or_default().replace(['\n', '\r'], " "),
        ])?;
    }
    finish(w)
}

pub fn timings_csv(rows: &[ExperimentRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TIMING_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.preset.clone(),
            r.replicate.to_string(),
            format!("{:.3}", r.train_seconds),
            format!("{:.3}", r.eval_seconds),
            format!("{:.3}", r.train_seconds + r.eval_seconds),
        ])?;
    }
    finish(w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneRecord {
    pub preset: String,
    pub replicate: usize,
    pub seed: u64,
    pub fraction: f64,
    pub nonzero: usize,
    pub total_prunable: usize,
    pub clean_accuracy: Option<f64>,
    pub robust_accuracy: Option<f64>,
    pub error: Option<String>,
}

pub fn prune_csv(manifest_sha256: &str, rows: &[PruneRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(PRUNE_COLUMNS)?;
    for r in rows {
        w.write_record([
            SCHEMA_VERSION.to_string(),
            manifest_sha256.to_string(),
            r.preset.clone(),
            r.replicate.to_string(),
            r.seed.to_string(),
            sig6(r.fraction),
            r.nonzero.to_string(),
            r.total_prunable.to_string(),
            opt(r.clean_accuracy),
            opt(r.robust_accuracy),
            r.error.clone().unwrap_or_default().replace(['\n', '\r'], " "),
        ])?;
    }
    finish(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.984375), "0.984375");
        assert_eq!(sig6(1.0), "1.00000");
        assert_eq!(sig6(123.456789), "123.457");
        assert_eq!(sig6(0.5), "0.500000");
        assert_eq!(sig6(0.0), "0.00000");
        assert_eq!(sig6(9.999995), "10.0000");
        assert_eq!(sig6(1234567.0), "1234567");
        assert_eq!(sig6(-0.03125), "-0.0312500");
        assert_eq!(sig6(f64::NAN), "nan");
    }
}
