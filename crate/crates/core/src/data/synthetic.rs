use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::LabeledImageSet;
use crate::error::{config, Result};
use crate::rng::{normal, seeded};
use crate::tensor::Tensor;

/// Two-class images: class 0 carries a low-frequency diagonal cosine,
/// class 1 a high-frequency one, both on a mid-grey background with
/// Gaussian pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticFreqSpec {
    pub side: usize,
    pub channels: usize,
    pub low_freq_index: usize,
    pub high_freq_index: usize,
    pub amplitude: f64,
    pub noise_std: f64,
    pub count: usize,
    pub seed: u64,
}

impl Default for SyntheticFreqSpec {
    fn default() -> Self {
        SyntheticFreqSpec {
            side: 8,
            channels: 1,
            low_freq_index: 1,
            high_freq_index: 3,
            amplitude: 0.25,
            noise_std: 0.1,
            count: 512,
            seed: 0,
        }
    }
}

impl SyntheticFreqSpec {
    pub fn classes(&self) -> usize {
        2
    }

    /// Noise-free pattern of class `label` at pixel `(m, n)`.
    pub fn pattern(&self, label: usize, m: usize, n: usize) -> f64 {
        let k = if label == 0 {
            self.low_freq_index
        } else {
            self.high_freq_index
        };
        0.5 + self.amplitude * (2.0 * PI * (k * (m + n)) as f64 / self.side as f64).cos()
    }
}

/// Generates the dataset; labels alternate 0, 1, 0, ... and all randomness
/// comes from `spec.seed`.
pub fn synth_freq_dataset(spec: &SyntheticFreqSpec) -> Result<LabeledImageSet> {
    if spec.side == 0 || spec.channels == 0 || spec.count == 0 {
        return Err(config("synthetic side, channels and count must be positive"));
    }
    if spec.low_freq_index >= spec.side || spec.high_freq_index >= spec.side {
        return Err(config(format!(
            "frequency indices {} / {} must be below side {}",
            spec.low_freq_index, spec.high_freq_index, spec.side
        )));
    }
    if spec.low_freq_index == spec.high_freq_index || !(spec.noise_std >= 0.0) {
        return Err(config("the two classes need distinct frequencies and a non-negative noise level"));
    }
    let (s, c) = (spec.side, spec.channels);
    let mut rng = seeded(spec.seed);
    let labels: Vec<usize> = (0..spec.count).map(|i| i % 2).collect();
    let mut data = Vec::with_capacity(spec.count * c * s * s);
    for &label in &labels {
        for _ in 0..c {
            for m in 0..s {
                for n in 0..s {
                    let v = spec.pattern(label, m, n) + normal(&mut rng, spec.noise_std);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    LabeledImageSet::new("synthetic-freq", 2, Tensor::new(vec![spec.count, c, s, s], data)?, labels)
}
