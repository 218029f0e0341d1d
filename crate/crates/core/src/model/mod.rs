//! Patch embedders, mask tokens, dual-branch inputs and the transformer encoder.

mod config;
mod mask;
mod network;

pub use config::{mask_count, ModelConfig, Sharing};
pub use mask::{batch_flags, batch_rows, make_mask, MaskSpec};
pub use network::{
    drop_path_rate, Block, Branch, DualForward, Encoded, Encoder, Graph, LayerNorm, Linear, Model, PatchBatch, INIT_STD,
};
