use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How one candidate is picked from a weighted candidate set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ReselectMode {
    /// Highest weight, ties to the lowest index.
    #[default]
    Deterministic,
    /// Draw with probability equal to the weight.
    Stochastic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    /// Candidate policy instances per step (J).
    pub candidates: usize,
    /// Lookahead of the long-horizon cost (K).
    pub lookahead: usize,
    /// Per-step discount of the cost, in (0, 1].
    pub discount: f64,
    /// Softmax temperature of the candidate weights, > 0.
    pub temperature: f64,
    /// Weight of the text-supervision term.
    pub text_weight: f64,
    /// Feature drop probability of a candidate mask.
    pub dropout: f64,
    pub reselection: ReselectMode,
    pub hash_dims: usize,
    pub hash_seed: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    /// Timesteps drawn per event and update; 0 uses every step.
    pub steps_per_event: usize,
    /// Initial weight scale (standard deviation).
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            candidates: 4,
            lookahead: 30,
            discount: 0.95,
            temperature: 1.0,
            text_weight: 0.5,
            dropout: 0.1,
            reselection: ReselectMode::Deterministic,
            hash_dims: 64,
            hash_seed: 0x9011,
            learning_rate: 0.05,
            weight_decay: 0.0,
            clip_norm: 5.0,
            epochs: 10,
            steps_per_event: 16,
            init_scale: 0.01,
            seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("policy: {m}")));
        if self.candidates == 0 {
            return bad("candidates must be at least 1");
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return bad("discount must lie in (0, 1]");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive and finite");
        }
        if !(self.text_weight >= 0.0 && self.text_weight.is_finite()) {
            return bad("text_weight must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Rate(self.dropout));
        }
        if !(self.learning_rate >= 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm > 0.0
            && self.init_scale >= 0.0)
        {
            return bad("optimizer settings must be non-negative (clip_norm positive)");
        }
        Ok(())
    }
}
