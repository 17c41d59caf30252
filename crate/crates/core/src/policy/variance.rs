use serde::{Deserialize, Serialize};

use super::mask::DropoutMask;
use super::tabular::TabularPolicy;
use crate::domain::MicroState;
use crate::error::{Error, Result};

/// Largest action space the check enumerates.
pub const ENUMERATION_CAP: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceCheck {
    /// Exact variance of the reward under the policy.
    pub variance: f64,
    /// `4M²(1 − π(a*))²` with `a*` the most probable action.
    pub bound: f64,
    /// `4M²(1 − π(a*))`, which every bounded reward satisfies.
    pub linear_bound: f64,
    pub top_prob: f64,
    pub pass: bool,
}

/// Exact reward variance under `probs` against the squared bound.
pub fn variance_bound(probs: &[f64], rewards: &[f64], reward_bound: f64) -> Result<VarianceCheck> {
    if probs.len() > ENUMERATION_CAP {
        return Err(Error::Enumeration(format!(
            "{} actions exceed the cap of {ENUMERATION_CAP}",
            probs.len()
        )));
    }
    if probs.len() != rewards.len() {
        return Err(Error::LengthMismatch {
            left: probs.len(),
            right: rewards.len(),
        });
    }
    if probs.is_empty() {
        return Err(Error::EmptySeries);
    }
    if let Some(r) = rewards.iter().find(|r| !(r.abs() <= reward_bound)) {
        return Err(Error::Config(format!(
            "reward {r} exceeds the bound {reward_bound}"
        )));
    }
    let mean: f64 = probs.iter().zip(rewards).map(|(p, r)| p * r).sum();
    let variance: f64 = probs
        .iter()
        .zip(rewards)
        .map(|(p, r)| p * (r - mean) * (r - mean))
        .sum();
    let mut top = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[top] {
            top = i;
        }
    }
    let gap = 1.0 - probs[top];
    let m2 = 4.0 * reward_bound * reward_bound;
    let bound = m2 * gap * gap;
    Ok(VarianceCheck {
        variance,
        bound,
        linear_bound: m2 * gap,
        top_prob: probs[top],
        pass: variance <= bound + 1e-12,
    })
}

/// [`variance_bound`] for the action distribution `π(·|z, λ)`; `rewards`
/// holds one value per action.
pub fn variance_bound_check(
    policy: &TabularPolicy,
    z: &MicroState<'_>,
    mask: &DropoutMask,
    rewards: &[f64],
    reward_bound: f64,
) -> Result<VarianceCheck> {
    if policy.n_actions > ENUMERATION_CAP {
        return Err(Error::Enumeration(format!(
            "{} actions exceed the cap of {ENUMERATION_CAP}",
            policy.n_actions
        )));
    }
    variance_bound(&policy.action_probs(z, mask)?, rewards, reward_bound)
}
