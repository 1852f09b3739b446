//! The xMTrans network: RevIN, token and positional embeddings, the
//! attention-based calendar embedding, C cross-modality fusion layers and a
//! linear readout.

mod checkpoint;
mod config;
mod forward;
mod params;
mod revin;

pub use checkpoint::{
    checkpoint_from_str, checkpoint_to_string, load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use config::{AblationWiring, ModelConfig, Readout};
pub use forward::{
    calendar_indices, encode, forward_on_tape, fusion_layer_forward, group_maps, masked_self_attention,
    masked_temporal_attention, mha, model_forward, model_forward_batch, positional_encoding, predict, readout,
    temporal_feature_embedding, token_embed_with_position, BatchForward, Encoded, LayerMaps, NormalizedBatch,
    PredictionBundle,
};
pub use params::{calendar_tables, parameter_layout, AttnVars, BoundParams, LayerVars, ModelParams};
pub use revin::{revin_denormalize, revin_normalize, RevInState, REVIN_EPS};

#[cfg(test)]
mod tests;
