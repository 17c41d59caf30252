//! Macro transition model: context encoding, the causal attention stack,
//! its training losses and incremental inference.

pub mod config;
pub mod context;
pub mod infer;
pub mod model;
pub mod train;

pub use config::TransitionConfig;
pub use context::{
    action_state_histogram, event_contexts, ContextEncoder, ContextLayout, EventContexts,
    TransitionContext,
};
pub use infer::{rollout_from, IdentityModel, MeanFieldModel, ModelState, Session};
pub use model::TransitionModel;
pub use train::{
    gradient_check, loss_and_grads, model_encoder, prepare_event, prepared_loss, train_prepared,
    train_transition, EpochLoss, LossCurve, PreparedEvent, TransitionLosses,
};

#[cfg(test)]
mod tests;
