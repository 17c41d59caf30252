//! Distributional and classification metrics between simulated and
//! reference trajectories.

pub mod annotate;
pub mod divergence;
pub mod dtw;
pub mod evaluate;
pub mod f1;

pub use annotate::{annotate_action, AnnotatorBackend, KeywordRules};
pub use divergence::{
    kl_divergence, kl_smoothed, wasserstein_distance, wasserstein_with, GroundMetric, KL_SMOOTHING,
};
pub use dtw::{dtw, dtw_distance, StepCost};
pub use evaluate::{
    evaluate_trajectories, mean_field_kl_series, nll, ActionLikelihood, EvalOptions, MetricReport,
};
pub use f1::{f1_scores, F1Scores};
