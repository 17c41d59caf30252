use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::ReselectMode;
use super::mask::DropoutMask;
use crate::domain::MeanField;
use crate::error::{Error, Result};
use crate::metrics::kl_divergence;
use crate::rng::Rng;
use crate::transition::{ModelState, TransitionContext};

/// `Σ_{k=1..K} γ^{k−1} KL(truth_k ‖ predicted_k)` over the first `k` steps.
pub fn discounted_cost(
    truth: &[MeanField],
    predicted: &[MeanField],
    k: usize,
    discount: f64,
) -> Result<f64> {
    if truth.len() < k || predicted.len() < k {
        return Err(Error::Horizon(format!(
            "cost over {k} steps with {} true and {} predicted",
            truth.len(),
            predicted.len()
        )));
    }
    let mut v = 0.0;
    let mut g = 1.0;
    for (t, p) in truth[..k].iter().zip(&predicted[..k]) {
        v += g * kl_divergence(t, p)?;
        g *= discount;
    }
    Ok(v)
}

/// Long-horizon cost of one candidate. The candidate's actions are already
/// folded into `first`, the context of the step after the current one; the
/// model rolls `k` steps from `state` and is scored against `truth`.
pub fn long_horizon_cost(
    state: &dyn ModelState,
    start: &MeanField,
    first: &TransitionContext,
    future: &[TransitionContext],
    truth: &[MeanField],
    k: usize,
    discount: f64,
) -> Result<f64> {
    Ok(candidate_costs(
        state,
        start,
        std::slice::from_ref(first),
        future,
        truth,
        k,
        discount,
    )?[0])
}

/// Costs of several candidates rolled out in one batch.
pub fn candidate_costs(
    state: &dyn ModelState,
    start: &MeanField,
    firsts: &[TransitionContext],
    future: &[TransitionContext],
    truth: &[MeanField],
    k: usize,
    discount: f64,
) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Horizon("lookahead must be at least 1".into()));
    }
    if truth.len() < k {
        return Err(Error::Horizon(format!(
            "{} true future steps for a lookahead of {k}",
            truth.len()
        )));
    }
    let rolls = state.rollout_batch(start, firsts, future, k)?;
    rolls
        .iter()
        .map(|r| discounted_cost(truth, r, k, discount))
        .collect()
}

/// `w_j ∝ exp(−β·V_j)`, shifted by the minimum cost.
pub fn candidate_weights(costs: &[f64], temperature: f64) -> Vec<f64> {
    let Some(min) = costs.iter().copied().reduce(f64::min) else {
        return Vec::new();
    };
    let mut w: Vec<f64> = costs
        .iter()
        .map(|v| (-temperature * (v - min)).exp())
        .collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= z);
    w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub mask: DropoutMask,
    pub actions: Vec<usize>,
    pub cost: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    pub temperature: f64,
    pub discount: f64,
    pub horizon: usize,
}

impl CandidateSet {
    /// Weigh `(mask, actions, cost)` triples.
    pub fn new(
        entries: Vec<(DropoutMask, Vec<usize>, f64)>,
        temperature: f64,
        discount: f64,
        horizon: usize,
    ) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("empty candidate set".into()));
        }
        let costs: Vec<f64> = entries.iter().map(|e| e.2).collect();
        if costs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Config("non-finite candidate cost".into()));
        }
        let weights = candidate_weights(&costs, temperature);
        let candidates = entries
            .into_iter()
            .zip(weights)
            .map(|((mask, actions, cost), weight)| Candidate {
                mask,
                actions,
                cost,
                weight,
            })
            .collect();
        Ok(CandidateSet {
            candidates,
            temperature,
            discount,
            horizon,
        })
    }

    pub fn weights(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.weight).collect()
    }
}

/// Index of the chosen candidate.
pub fn reselect_actions(set: &CandidateSet, mode: ReselectMode, rng: &mut Rng) -> usize {
    match mode {
        ReselectMode::Deterministic => {
            let mut best = 0;
            for (i, c) in set.candidates.iter().enumerate() {
                if c.weight > set.candidates[best].weight {
                    best = i;
                }
            }
            best
        }
        ReselectMode::Stochastic => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, c) in set.candidates.iter().enumerate() {
                acc += c.weight;
                if u < acc {
                    return i;
                }
            }
            set.candidates
                .iter()
                .rposition(|c| c.weight > 0.0)
                .unwrap_or(0)
        }
    }
}
