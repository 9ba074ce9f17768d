//! Desk-scale Vision Transformer: configuration, parameters, forward
//! and backward passes, losses, optimizer, and checkpointing.

mod backward;
mod checkpoint;
mod config;
mod forward;
mod loss;
mod optimizer;
mod state;

pub use backward::{
    compute_gradient, compute_input_gradient, Gradient, GradientOutput, ObjectiveTerm, TermLoss,
};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{Label, TaskKind, ViTConfig};
pub use forward::forward;
pub use loss::{kd_per_sample, per_sample_loss};
pub use optimizer::{clip_gradient_norm, optimizer_step, OptimizerState};
pub use state::{
    build_model, reinitialize_masked, set_trainable_last_k, ModelState, NamedTensors, ParamMask,
};
