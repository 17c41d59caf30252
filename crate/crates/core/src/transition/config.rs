use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture, context encoding and optimization settings of the
/// transition model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransitionConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Residual dropout, active only while training.
    pub dropout: f64,
    /// Attention span in positions, including the query itself.
    pub window: usize,
    /// Width of each hashed text block.
    pub hash_dims: usize,
    pub hash_seed: u64,
    pub learning_rate: f64,
    /// Events per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Rollout horizon of the consistency loss.
    pub rollout_k: usize,
    /// Weight of the rollout loss.
    pub alpha_trans: f64,
    pub seed: u64,
}

impl Default for TransitionConfig {
    fn default() -> Self {
        TransitionConfig {
            d_model: 32,
            layers: 2,
            heads: 2,
            d_ff: 64,
            dropout: 0.1,
            window: 16,
            hash_dims: 64,
            hash_seed: 0x5eed,
            learning_rate: 3e-3,
            batch_size: 4,
            epochs: 20,
            weight_decay: 1e-5,
            clip_norm: 1.0,
            rollout_k: 30,
            alpha_trans: 1.0,
            seed: 0,
        }
    }
}

impl TransitionConfig {
    /// The full-size settings: width 256, 3 layers, 8 heads, feed-forward
    /// 1024, learning rate 2e-5.
    pub fn full_scale() -> Self {
        TransitionConfig {
            d_model: 256,
            layers: 3,
            heads: 8,
            d_ff: 1024,
            learning_rate: 2e-5,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("window", self.window),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config("heads must divide d_model".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(self.learning_rate >= 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm > 0.0
            && self.alpha_trans >= 0.0)
        {
            return Err(Error::Config(
                "learning rate, weight decay, clip norm and alpha must be non-negative".into(),
            ));
        }
        Ok(())
    }
}
