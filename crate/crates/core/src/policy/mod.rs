//! Agent policy: dropout-induced policy instances, long-horizon scoring of
//! candidate joint actions through the transition model, softmax
//! reselection, and training.

pub mod backend;
pub mod config;
pub mod external;
pub mod features;
pub mod mask;
pub mod select;
pub mod tabular;
pub mod train;
pub mod variance;

pub use backend::{sample_action, PolicyBackend};
pub use config::{PolicyConfig, ReselectMode};
pub use external::{parse_action, ExternalPolicy};
pub use features::{PolicyFeatures, StepFeatures};
pub use mask::{sample_mask, DropoutMask};
pub use select::{
    candidate_costs, candidate_weights, discounted_cost, long_horizon_cost, reselect_actions,
    Candidate, CandidateSet,
};
pub use tabular::{sample_categorical, TabularPolicy};
pub use train::{
    event_loss_and_grad, plan_event, policy_gradient_check, policy_loss, prepare_policy_event,
    train_policy, train_tabular, LossPlan, PolicyCurve, PolicyEpoch, PolicyEvent, PolicyLikelihood,
    PolicyLosses,
};
pub use variance::{variance_bound, variance_bound_check, VarianceCheck, ENUMERATION_CAP};

#[cfg(test)]
mod tests;
