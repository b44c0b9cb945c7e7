use std::f64::consts::PI;

use num_complex::Complex64;

/// `x[n] = (1/N) Σ_k X[k] e^{+j2πkn/N}`, evaluated directly.
pub fn idft(coeffs: &[Complex64]) -> Vec<Complex64> {
    let n = coeffs.len();
    (0..n)
        .map(|t| {
            let acc: Complex64 = coeffs
                .iter()
                .enumerate()
                .map(|(k, &c)| c * Complex64::from_polar(1.0, 2.0 * PI * ((k * t) % n) as f64 / n as f64))
                .sum();
            acc / n as f64
        })
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a probability `p` against label 1 or 0.
pub fn binary_cross_entropy(p: f64, label: bool) -> f64 {
    let p = p.clamp(1e-300, 1.0 - 1e-16);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// How far sigmoid outputs and two-class cross-entropy spread when a
/// pre-activation moves from `x1` to `x2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRange {
    pub y1: f64,
    pub y2: f64,
    /// Loss against the negative label at `x1` and `x2`.
    pub l1: f64,
    pub l2: f64,
}

impl LossRange {
    pub fn width(&self) -> f64 {
        (self.l2 - self.l1).abs()
    }
}

pub fn loss_range(x1: f64, x2: f64) -> LossRange {
    let (y1, y2) = (sigmoid(x1), sigmoid(x2));
    LossRange {
        y1,
        y2,
        l1: binary_cross_entropy(y1, false),
        l2: binary_cross_entropy(y2, false),
    }
}
