//! Manifest-driven experiment runner built on `robustlab-core`.
//!
//! A manifest names a dataset, a list of structures, a training recipe
//! and the evaluations to run; the subcommands in [`cli`] execute those
//! stages and write CSV tables, heatmap images and checkpoints into the
//! output directory.

pub mod cli;
pub mod fsutil;
pub mod manifest;
pub mod pipeline;
pub mod records;

pub use manifest::{LoadedManifest, Manifest, ManifestError};
pub use pipeline::{run_grid, Run};
