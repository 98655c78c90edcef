//! Time Router (which hierarchy level conditions each diffusion step) and
//! Space Router (cross-attention from latent tokens onto expert embeddings).
//!
//! Router time `τ` counts generation progress: τ = 0 is the first, noisiest
//! sampling step. Callers holding a noise index t convert with τ = T−1−t.

mod space;
mod time;

pub use space::{
    block_attention, build_selection, space_condition, stack_embeddings, space_condition_batch, Selection, SpaceRouter,
    SpaceRouterConfig,
};
pub use time::{
    guide_distribution, kl_penalty, kl_penalty_batch, select_level, time_embedding, time_weights,
    LevelMode, LevelSelection, TimeRouter, TimeRouterConfig,
};
