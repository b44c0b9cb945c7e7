//! Read-only probes of a trained model: frequency sensitivity, local
//! Lipschitz lower bounds, token rank collapse, and a small spectral /
//! loss-range toolkit.

mod collapse;
mod fourier;
mod lipschitz;
mod render;
mod spectral;

pub use collapse::{rank1_residual, rank_collapse_profile};
pub use fourier::{basis_sign, fourier_basis, fourier_heatmap, perturb_with_basis, FourierBasisSpec, FourierHeatmap};
pub use lipschitz::{linear_lipschitz_bound, local_lipschitz, LipschitzConfig, LipschitzEstimate};
pub use render::{color_table, heatmap_csv, render_ppm};
pub use spectral::{binary_cross_entropy, idft, loss_range, sigmoid, LossRange};

/// Default ℓ2 norm of heatmap perturbations, in pixel units.
pub const DEFAULT_HEATMAP_NORM: f64 = 4.0;
/// Default number of evaluation samples per heatmap.
pub const DEFAULT_HEATMAP_SAMPLES: usize = 256;
