//! AdamW with freeze masking, the warmup + cosine learning-rate schedule, and
//! the loss-improvement-threshold (LIT) unfreeze rule.

mod adamw;
mod lit;
mod schedule;

pub use adamw::{adamw_step, clip_grad_norm, decays_weight, AdamWConfig, OptimizerState};
pub use lit::{LitConfig, LitEvent, LitState};
pub use schedule::{lr_at, ScheduleConfig};
