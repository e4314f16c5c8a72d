//! Miniature multimodal backbone: patch embedding, causal transformer with
//! low-rank adapters, and the sequence layout around the gaze placeholders.

mod config;
mod forward;
mod params;
mod sequence;

pub use config::ModelConfig;
pub use forward::{embed_image, forward, forward_traced, Trace};
pub use params::{
    Backbone, Block, BlockAdapters, LayerNorm, Linear, LoraPair, ModelState, ParamGroup, ParamView, Stage, TensorMut,
    TensorRef,
};
pub use sequence::{build_sequence, image_patches, Sample, SequenceLayout};
