//! Factorized spatio-temporal layer with module-specific sigmoid gating.
//!
//! A layer runs spatial self-attention within each frame, temporal
//! self-attention across frames at each patch site, and a SwiGLU MLP. Each
//! sublayer output `y` is merged into its input `x` as
//! `sigmoid([x, y] W) * y + x`. With gating off the merge is the plain
//! residual `y + x`.

mod config;
mod layer;
mod params;

pub use config::{default_mlp_hidden, GateOverride, TGConfig};
pub use layer::{
    axis_view, gated_residual, multi_head_self_attention, swiglu_mlp, tg_forward, tg_layer_forward, GateCapture,
    Submodule, ViewMode,
};
pub use params::{init_layer, AttentionParams, MlpParams, TGLayerParams, INIT_STD, LAYER_FIELDS};
