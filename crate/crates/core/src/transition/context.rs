//! Fixed-width encoding of the per-step event context.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::domain::{
    ActionRecord, ActionSpace, AgentPersona, EventTimeline, ExogenousSignal, MeanField, StateSpace,
    Synopsis,
};
use crate::features::FeatureHasher;
use crate::labels::LabelDimension;
use crate::summarizer::TemplateSummarizer;
use crate::tape::Mat;

/// Block offsets of a context vector:
/// `[synopsis | previous mean field | previous action states | personas | signal]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextLayout {
    pub hash_dims: usize,
    pub n_states: usize,
}

impl ContextLayout {
    pub fn width(&self) -> usize {
        3 * self.hash_dims + 2 * self.n_states
    }

    pub fn synopsis(&self) -> Range<usize> {
        0..self.hash_dims
    }

    pub fn mean_field(&self) -> Range<usize> {
        self.hash_dims..self.hash_dims + self.n_states
    }

    pub fn actions(&self) -> Range<usize> {
        self.hash_dims + self.n_states..self.hash_dims + 2 * self.n_states
    }

    pub fn personas(&self) -> Range<usize> {
        self.hash_dims + 2 * self.n_states..2 * self.hash_dims + 2 * self.n_states
    }

    pub fn signal(&self) -> Range<usize> {
        2 * self.hash_dims + 2 * self.n_states..self.width()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionContext {
    pub layout: ContextLayout,
    pub features: Vec<f64>,
}

impl TransitionContext {
    pub fn mean_field(&self) -> &[f64] {
        &self.features[self.layout.mean_field()]
    }

    pub fn set_mean_field(&mut self, m: &[f64]) {
        let r = self.layout.mean_field();
        self.features[r].copy_from_slice(m);
    }

    pub fn set_actions(&mut self, a: &[f64]) {
        let r = self.layout.actions();
        self.features[r].copy_from_slice(a);
    }

    pub fn set_synopsis(&mut self, block: &[f64]) {
        let r = self.layout.synopsis();
        self.features[r].copy_from_slice(block);
    }

    pub fn synopsis(&self) -> &[f64] {
        &self.features[self.layout.synopsis()]
    }

    pub fn actions(&self) -> &[f64] {
        &self.features[self.layout.actions()]
    }
}

/// Seeded hashing encoder for the text blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextEncoder {
    pub layout: ContextLayout,
    pub seed: u64,
}

impl ContextEncoder {
    pub fn new(hash_dims: usize, n_states: usize, seed: u64) -> Self {
        ContextEncoder {
            layout: ContextLayout {
                hash_dims,
                n_states,
            },
            seed,
        }
    }

    fn hasher(&self, block: u64) -> FeatureHasher {
        FeatureHasher::new(self.layout.hash_dims, self.seed.wrapping_add(block))
    }

    pub fn encode_synopsis_into(&self, synopsis: &str, out: &mut [f64]) {
        self.hasher(0).encode_into(synopsis, out);
    }

    pub fn encode_personas_into<'a>(
        &self,
        personas: impl IntoIterator<Item = &'a AgentPersona>,
        out: &mut [f64],
    ) {
        let pooled = self
            .hasher(1)
            .pooled(personas.into_iter().map(|p| p.profile.as_str()));
        out.copy_from_slice(&pooled);
    }

    /// Hashed features of one persona profile; the persona block of a
    /// context is the mean over the active agents.
    pub fn encode_persona(&self, persona: &AgentPersona) -> Vec<f64> {
        self.hasher(1).encode(&persona.profile)
    }

    pub fn encode_signal_into(&self, signal: Option<&ExogenousSignal>, out: &mut [f64]) {
        match signal {
            Some(s) => self.hasher(2).encode_into(&s.text, out),
            None => out.iter_mut().for_each(|v| *v = 0.0),
        }
    }

    /// Context of one step: the previous synopsis, mean field and action
    /// state histogram, the active personas and the step's signal.
    pub fn encode<'a>(
        &self,
        synopsis: &Synopsis,
        mean_field: &MeanField,
        action_states: &MeanField,
        personas: impl IntoIterator<Item = &'a AgentPersona>,
        signal: Option<&ExogenousSignal>,
    ) -> TransitionContext {
        let l = self.layout;
        let mut f = vec![0.0; l.width()];
        self.encode_synopsis_into(synopsis.text(), &mut f[l.synopsis()]);
        f[l.mean_field()].copy_from_slice(mean_field.probs());
        f[l.actions()].copy_from_slice(action_states.probs());
        self.encode_personas_into(personas, &mut f[l.personas()]);
        self.encode_signal_into(signal, &mut f[l.signal()]);
        TransitionContext {
            layout: l,
            features: f,
        }
    }
}

/// State histogram of a step's actions, from their State labels or, when
/// unlabelled, from the action's profile. `None` when nothing maps to a
/// state.
pub fn action_state_histogram(
    actions: &[ActionRecord],
    space: &ActionSpace,
    states: &StateSpace,
) -> Option<MeanField> {
    let mut counts = vec![0.0; states.len()];
    let mut n = 0.0;
    for a in actions {
        let idx = match a.label(LabelDimension::State) {
            Some(l) => states.index_of(l),
            None if a.action_index < space.len() => space.state_of(a.action_index, states),
            None => None,
        };
        if let Some(i) = idx {
            counts[i] += 1.0;
            n += 1.0;
        }
    }
    (n > 0.0).then(|| MeanField::from_weights(&counts).expect("positive counts"))
}

/// Contexts of every step of a recorded event, built along the ground truth.
#[derive(Debug, Clone)]
pub struct EventContexts {
    pub layout: ContextLayout,
    /// One context row per step.
    pub inputs: Mat,
    /// `m*` rows, when the event carries them.
    pub targets: Option<Mat>,
    /// Synopsis after each step.
    pub synopses: Vec<Synopsis>,
}

impl EventContexts {
    pub fn len(&self) -> usize {
        self.inputs.rows
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows == 0
    }

    pub fn context(&self, k: usize) -> TransitionContext {
        TransitionContext {
            layout: self.layout,
            features: self.inputs.row(k).to_vec(),
        }
    }
}

/// Replay `event` through the template summarizer and encode every step.
pub fn event_contexts(
    event: &EventTimeline,
    encoder: &ContextEncoder,
    token_budget: usize,
) -> EventContexts {
    let layout = encoder.layout;
    let summarizer = {
        let mut s = TemplateSummarizer::new(
            event.topic.clone(),
            event.states.clone(),
            event.actions.clone(),
        );
        s.token_budget = token_budget;
        s
    };
    let t = event.horizon();
    let mut inputs = Mat::zeros(t, layout.width());
    let mut targets = Mat::zeros(t, layout.n_states);
    let mut has_targets = true;
    let mut synopses = Vec::with_capacity(t);
    let mut r_prev = Synopsis::empty(token_budget);
    let mut m_prev = event.initial_mean_field();
    let mut a_prev = m_prev.clone();
    for (k, step) in event.steps.iter().enumerate() {
        let personas = step.active.iter().filter_map(|id| event.persona(id));
        let ctx = encoder.encode(&r_prev, &m_prev, &a_prev, personas, step.signal.as_ref());
        inputs.row_mut(k).copy_from_slice(&ctx.features);
        let hist = action_state_histogram(&step.actions, &event.actions, &event.states);
        let m = match &step.empirical_mean_field {
            Some(m) => m.clone(),
            None => {
                has_targets = false;
                hist.clone().unwrap_or_else(|| m_prev.clone())
            }
        };
        targets.row_mut(k).copy_from_slice(m.probs());
        r_prev = summarizer.summarize(&r_prev, &m, &step.actions, step.signal.as_ref());
        synopses.push(r_prev.clone());
        a_prev = hist.unwrap_or_else(|| m.clone());
        m_prev = m;
    }
    EventContexts {
        layout,
        inputs,
        targets: has_targets.then_some(targets),
        synopses,
    }
}
