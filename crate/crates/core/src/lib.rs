//! Composable vision-transformer structures, adversarial training and
//! robustness diagnostics at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`autograd`]: dense `f64` arrays and a reverse-mode tape.
//! * [`nn`]: parameter storage, layers and the [`nn::Network`] trait.
//! * [`structure`]: the architecture grid, its compatibility rules and presets.
//! * [`train`]: standard and min-max adversarial training, checkpoints.
//! * [`attack`]: FGSM, multi-restart PGD and a random-search black-box attack.
//! * [`diagnostics`]: Fourier heatmaps, local Lipschitz estimates, rank
//!   collapse and the DFT helpers.
//! * [`prune`]: global magnitude pruning and sparsity sweeps.
//! * [`data`]: CIFAR-10 binary batches and a synthetic frequency dataset.

pub mod attack;
pub mod autograd;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod nn;
pub mod prune;
pub mod rng;
pub mod structure;
pub mod tensor;
pub mod train;

pub use autograd::{grad_check, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
