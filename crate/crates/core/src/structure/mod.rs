//! Architecture grid: declarative specs, their compatibility rules, named
//! presets and the model built from a spec.

mod model;
mod presets;
mod spec;
mod tokens;

pub use model::{add_position, trace_forward, BlockAggregate, InputNorm, Model, Trace, DEFAULT_WEIGHT_STD};
pub use presets::{ablation_presets, all_preset_ids, structure_from_preset, TABLE_PRESETS};
pub use spec::{
    Scale,
    rules, validate_structure, Cmlp, Embedding, Family, Grid, ImageDims, Norm, Skip, Stacking, StructureSpec,
    TokenMixer,
};
pub use tokens::{
    map_to_tokens, merge_patches, patchify, patchify_var, tokens_to_map, window_merge_unshift,
    window_partition_shift, Windows,
};
