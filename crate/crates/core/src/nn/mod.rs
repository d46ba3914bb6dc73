//! Dense-tensor layers with exact reverse-mode gradients, parameter storage
//! with EMA shadows, the AdamW optimizer, and checkpoint serialization.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;

pub use layers::{
    attention_backward, attention_forward, conv2d_backward, conv2d_forward, group_norm_backward,
    group_norm_forward, linear_backward, linear_forward, silu_backward, silu_forward,
    time_embedding, upsample_nearest2_backward, upsample_nearest2_forward, AttentionCtx,
    AttentionGrads, AttentionParams, ConvCtx, GroupNormCtx, LinearCtx, SiluCtx, GROUP_NORM_EPS,
};
pub use optim::{cosine_lr, AdamW};
pub use params::{load_checkpoint, save_checkpoint, Checkpoint, ParamId, ParamStore};
