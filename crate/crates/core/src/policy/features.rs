use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::domain::{AgentPersona, ExogenousSignal, MeanField, MicroState, Synopsis};
use crate::features::FeatureHasher;

/// Feature layout of the tabular policy:
/// `[state one-hot | mean field | synopsis | signal | persona | 1]`, where
/// the first two blocks exist only for state-aware policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyFeatures {
    pub hash_dims: usize,
    pub n_states: usize,
    pub state_aware: bool,
    pub seed: u64,
}

impl PolicyFeatures {
    fn state_width(&self) -> usize {
        if self.state_aware {
            self.n_states
        } else {
            0
        }
    }

    pub fn width(&self) -> usize {
        2 * self.state_width() + 3 * self.hash_dims + 1
    }

    pub fn state(&self) -> Range<usize> {
        0..self.state_width()
    }

    pub fn mean_field(&self) -> Range<usize> {
        let s = self.state_width();
        s..2 * s
    }

    pub fn synopsis(&self) -> Range<usize> {
        let s = 2 * self.state_width();
        s..s + self.hash_dims
    }

    pub fn signal(&self) -> Range<usize> {
        let s = self.synopsis().end;
        s..s + self.hash_dims
    }

    pub fn persona(&self) -> Range<usize> {
        let s = self.signal().end;
        s..s + self.hash_dims
    }

    pub fn bias(&self) -> usize {
        self.width() - 1
    }

    fn hasher(&self, block: u64) -> FeatureHasher {
        FeatureHasher::new(self.hash_dims, self.seed.wrapping_add(block))
    }

    pub fn persona_block(&self, persona: &AgentPersona) -> Vec<f64> {
        self.hasher(2).encode(&persona.profile)
    }

    /// Features shared by every agent of a step: everything but the state
    /// and persona blocks.
    pub fn step(
        &self,
        synopsis: &Synopsis,
        mean_field: &MeanField,
        signal: Option<&ExogenousSignal>,
    ) -> StepFeatures {
        let mut base = vec![0.0; self.width()];
        if self.state_aware {
            base[self.mean_field()].copy_from_slice(mean_field.probs());
        }
        self.hasher(0)
            .encode_into(synopsis.text(), &mut base[self.synopsis()]);
        if let Some(s) = signal {
            self.hasher(1)
                .encode_into(&s.text, &mut base[self.signal()]);
        }
        let b = self.bias();
        base[b] = 1.0;
        StepFeatures {
            layout: *self,
            base,
        }
    }

    pub fn encode(&self, z: &MicroState<'_>) -> Vec<f64> {
        let step = self.step(z.synopsis, z.mean_field, z.signal);
        let mut out = vec![0.0; self.width()];
        step.agent_into(z.state.index(), &self.persona_block(z.persona), &mut out);
        out
    }
}

/// Step-level part of the features, completed per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFeatures {
    pub layout: PolicyFeatures,
    pub base: Vec<f64>,
}

impl StepFeatures {
    pub fn agent_into(&self, state: usize, persona: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.base);
        if self.layout.state_aware {
            out[state] = 1.0;
        }
        out[self.layout.persona()].copy_from_slice(persona);
    }
}
