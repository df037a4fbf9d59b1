//! Decoder-only transformer with alternating dense and top-2 expert layers.

mod config;
pub mod moe;
mod params;
mod positions;
mod transformer;

pub use config::ModelConfig;
pub use moe::{
    expert_capacity, gate_loss, moe_layer_forward, MoeOutput, MoeVars, RouterStats, RoutingPlan,
};
pub use params::{is_expert_param, Param, ParamStore, EXPERT_SEGMENT};
pub use positions::sinusoidal_positions;
pub use transformer::{
    causal_attention, ffn, AttentionVars, FfnVars, ForwardOptions, ForwardOutput, Mode, Routing,
    Transformer,
};
