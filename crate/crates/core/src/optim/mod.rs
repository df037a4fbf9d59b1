//! Optimizer, learning-rate schedule and FP16 state helpers.

mod adam;
mod fp16;
mod schedule;

pub use adam::{clip_grad_norm, rescale_expert_gradients, Adam, AdamConfig, Moments};
pub use fp16::{fp16_state_rescale, fp16_state_unscale, FLOAT16_MAX, RESCALE_EPS};
pub use schedule::{Schedule, DEFAULT_WARMUP_RATIO};
