//! Identification network: input standardization, linear projection,
//! sinusoidal positions, post-norm transformer encoder, stacked GRU, and
//! either a unit embedding or a logits head.

mod config;
mod network;

pub use config::{ModelConfig, ModelKind, MAX_POSITIONS};
pub use network::{
    forward_graph, parameter_layout, positional_encode, positional_table, transformer_layer,
    Bound, Mode, SequenceModel, INFER_CHUNK, LAYER_NORM_EPS,
};

#[cfg(test)]
mod tests;
