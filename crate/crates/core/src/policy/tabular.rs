use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::PolicyConfig;
use super::features::PolicyFeatures;
use super::mask::DropoutMask;
use crate::domain::MicroState;
use crate::error::{Error, Result};
use crate::optim::Tensor;
use crate::rng::{self, Rng};
use crate::tape::softmax_in_place;

const CHECKPOINT_FORMAT: &str = "mfmdp-policy";
const CHECKPOINT_VERSION: u32 = 1;

/// Linear softmax policy over masked features: `π(·|x, λ) = softmax((x ⊙ λ)·W)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub config: PolicyConfig,
    pub features: PolicyFeatures,
    pub n_actions: usize,
    /// `features.width() × n_actions`.
    pub weights: Tensor,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    policy: TabularPolicy,
}

impl TabularPolicy {
    pub fn new(
        config: PolicyConfig,
        n_states: usize,
        n_actions: usize,
        state_aware: bool,
    ) -> Result<Self> {
        config.validate()?;
        if n_actions == 0 || n_states == 0 {
            return Err(Error::InvalidSpace(
                "policy needs at least one state and one action".into(),
            ));
        }
        let features = PolicyFeatures {
            hash_dims: config.hash_dims,
            n_states,
            state_aware,
            seed: config.hash_seed,
        };
        let mut weights = Tensor::zeros("weights", features.width(), n_actions);
        if config.init_scale > 0.0 {
            let normal = Normal::new(0.0, config.init_scale).expect("finite scale");
            let mut r = rng::substream(config.seed, "policy-init");
            weights
                .data
                .iter_mut()
                .for_each(|w| *w = normal.sample(&mut r));
        }
        Ok(TabularPolicy {
            config,
            features,
            n_actions,
            weights,
        })
    }

    pub fn width(&self) -> usize {
        self.features.width()
    }

    fn check_width(&self, x: &[f64], mask: &DropoutMask) -> Result<()> {
        if x.len() != self.width() || mask.width() != self.width() {
            return Err(Error::Shape(format!(
                "features {} / mask {} vs policy width {}",
                x.len(),
                mask.width(),
                self.width()
            )));
        }
        Ok(())
    }

    /// Logits of masked features, skipping zero and dropped entries.
    pub fn logits_into(&self, x: &[f64], mask: &DropoutMask, out: &mut [f64]) {
        let a = self.n_actions;
        out.fill(0.0);
        for (f, (&v, &keep)) in x.iter().zip(&mask.keep).enumerate() {
            if keep && v != 0.0 {
                let row = &self.weights.data[f * a..(f + 1) * a];
                out.iter_mut().zip(row).for_each(|(o, w)| *o += v * w);
            }
        }
    }

    pub fn probs_into(&self, x: &[f64], mask: &DropoutMask, out: &mut [f64]) {
        self.logits_into(x, mask, out);
        softmax_in_place(out);
    }

    pub fn probs(&self, x: &[f64], mask: &DropoutMask) -> Result<Vec<f64>> {
        self.check_width(x, mask)?;
        let mut out = vec![0.0; self.n_actions];
        self.probs_into(x, mask, &mut out);
        if out.iter().any(|p| !p.is_finite()) {
            return Err(Error::Backend("non-finite policy logits".into()));
        }
        Ok(out)
    }

    /// `π(·|z, λ)`.
    pub fn action_probs(&self, z: &MicroState<'_>, mask: &DropoutMask) -> Result<Vec<f64>> {
        self.probs(&self.features.encode(z), mask)
    }

    pub fn sample(&self, z: &MicroState<'_>, mask: &DropoutMask, rng: &mut Rng) -> Result<usize> {
        Ok(sample_categorical(&self.action_probs(z, mask)?, rng))
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            policy: self.clone(),
        };
        serde_json::to_string(&ck).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let p = ck.policy;
        let w = &p.weights;
        if w.rows != p.features.width() || w.cols != p.n_actions || w.data.len() != w.rows * w.cols
        {
            return Err(Error::Checkpoint(
                "policy weights do not match the feature layout".into(),
            ));
        }
        if w.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint("non-finite policy weights".into()));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Inverse-CDF draw; falls back to the last action with positive mass.
pub fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}
