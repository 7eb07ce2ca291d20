//! Conditional noise predictor with energy-based cross-attention.

mod energy;
mod model;

pub use energy::{
    alignment_descent, energy_alignment, energy_reg, hopfield_energy, hopfield_update,
    reg_gradient, AgdConfig, EnergyCrossAttention, EnergyCrossAttentionCache,
};
pub use model::{
    ConceptEmbedding, Denoiser, DenoiserConfig, ForwardCache, MixLayerTrace, MixTrace,
    NULL_TOKEN_ROW,
};
