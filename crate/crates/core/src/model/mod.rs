//! The hierarchical backbone: configuration, parameter layout, forward pass
//! and checkpoints.

mod attention;
mod checkpoint;
mod config;
mod network;
mod params;

pub use attention::{attention_weights, multi_head_attention};
pub use checkpoint::{archive_config, load_checkpoint, save_checkpoint, LoadReport, Strictness, CONFIG_ENTRY};
pub use config::{apply_pairs, parse_pairs, ConfigPair, ModelConfig, StageConfig, Variant};
pub use network::{
    merge_indices, patch_embed, patch_indices, patch_merge_forward, ss_block_forward, transformer_block_forward, ForwardOutput,
    Mode, Model, Params,
};
pub use params::{attention_block_params, count_params, param_breakdown, param_specs, Init, ParamSpec, ParamStore, SCAN_FIELDS};
