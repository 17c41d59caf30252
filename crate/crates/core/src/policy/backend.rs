use super::external::ExternalPolicy;
use super::mask::DropoutMask;
use super::tabular::TabularPolicy;
use crate::domain::MicroState;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub enum PolicyBackend {
    Tabular(TabularPolicy),
    External(ExternalPolicy),
}

impl PolicyBackend {
    /// Width of the masks this backend accepts; the external backend has
    /// no features and ignores its mask.
    pub fn feature_width(&self) -> usize {
        match self {
            PolicyBackend::Tabular(p) => p.width(),
            PolicyBackend::External(_) => 0,
        }
    }

    pub fn state_aware(&self) -> bool {
        match self {
            PolicyBackend::Tabular(p) => p.features.state_aware,
            PolicyBackend::External(p) => p.state_aware,
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            PolicyBackend::Tabular(p) => p.n_actions,
            PolicyBackend::External(p) => p.actions.len(),
        }
    }

    pub fn tabular(&self) -> Result<&TabularPolicy> {
        match self {
            PolicyBackend::Tabular(p) => Ok(p),
            PolicyBackend::External(_) => Err(Error::Backend(
                "external policies expose no probabilities".into(),
            )),
        }
    }

    pub fn action_probs(&self, z: &MicroState<'_>, mask: &DropoutMask) -> Result<Vec<f64>> {
        self.tabular()?.action_probs(z, mask)
    }

    /// Log-probability of a joint action: the sum of per-agent terms.
    pub fn joint_log_prob(
        &self,
        agents: &[MicroState<'_>],
        actions: &[usize],
        mask: &DropoutMask,
    ) -> Result<f64> {
        if agents.len() != actions.len() {
            return Err(Error::LengthMismatch {
                left: agents.len(),
                right: actions.len(),
            });
        }
        let mut total = 0.0;
        for (z, &a) in agents.iter().zip(actions) {
            let p = self.action_probs(z, mask)?;
            total += p
                .get(a)
                .ok_or_else(|| Error::Shape(format!("action {a} out of range")))?
                .ln();
        }
        Ok(total)
    }
}

/// Draw one action for `z` under the policy instance `mask`.
pub fn sample_action(
    policy: &PolicyBackend,
    z: &MicroState<'_>,
    mask: &DropoutMask,
    rng: &mut Rng,
) -> Result<usize> {
    match policy {
        PolicyBackend::Tabular(p) => p.sample(z, mask, rng),
        PolicyBackend::External(p) => p.sample(z, rng),
    }
}
