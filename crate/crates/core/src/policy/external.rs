use rand::Rng as _;

use crate::domain::{ActionSpace, MicroState, StateSpace};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::service::{GenerateRequest, TextService};
use crate::summarizer::percent_half_up;

/// Policy backed by a text-generation service.
pub struct ExternalPolicy {
    pub service: Box<dyn TextService>,
    pub states: StateSpace,
    pub actions: ActionSpace,
    /// Include the agent's own state and the mean field in the prompt.
    pub state_aware: bool,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl ExternalPolicy {
    pub fn new(
        service: Box<dyn TextService>,
        states: StateSpace,
        actions: ActionSpace,
        state_aware: bool,
    ) -> Self {
        ExternalPolicy {
            service,
            states,
            actions,
            state_aware,
            max_tokens: 32,
            temperature: 0.7,
        }
    }

    pub fn prompt(&self, z: &MicroState<'_>) -> String {
        let mut p = format!(
            "You are a social media user. Persona: {}\n",
            z.persona.profile
        );
        if self.state_aware {
            p.push_str(&format!(
                "Your current stance: {}\n",
                self.states.label(z.state.index())
            ));
        }
        let synopsis = if z.synopsis.text().is_empty() {
            "(nothing yet)"
        } else {
            z.synopsis.text()
        };
        p.push_str(&format!("Public discussion so far: {synopsis}\n"));
        if self.state_aware {
            let shares: Vec<String> = self
                .states
                .labels()
                .iter()
                .zip(z.mean_field.probs())
                .map(|(l, m)| format!("{l} {}%", percent_half_up(*m)))
                .collect();
            p.push_str(&format!(
                "Current opinion distribution: {}\n",
                shares.join(", ")
            ));
        }
        if let Some(s) = z.signal {
            p.push_str(&format!("New message from {}: {}\n", s.source_id, s.text));
        }
        p.push_str("Choose exactly one action and answer with its name:\n");
        for (i, l) in self.actions.labels().iter().enumerate() {
            p.push_str(&format!("{}. {l}\n", i + 1));
        }
        p
    }

    /// One service call, retried once when the answer names no action.
    pub fn sample(&self, z: &MicroState<'_>, rng: &mut Rng) -> Result<usize> {
        let prompt = self.prompt(z);
        let mut last = String::new();
        for _ in 0..2 {
            let req = GenerateRequest {
                prompt: prompt.clone(),
                max_tokens: self.max_tokens,
                temperature: self.temperature,
                seed: Some(rng.random()),
            };
            let text = self.service.generate(&req)?;
            if let Some(a) = parse_action(&text, &self.actions) {
                return Ok(a);
            }
            last = text;
        }
        Err(Error::Parse(format!(
            "no action label in response `{}`",
            last.trim()
        )))
    }
}

/// Earliest action label occurring in `text` (case-insensitive); the
/// longest label wins among labels starting at the same position.
pub fn parse_action(text: &str, actions: &ActionSpace) -> Option<usize> {
    let hay = text.to_lowercase();
    let mut best: Option<(usize, usize, usize)> = None;
    for (i, label) in actions.labels().iter().enumerate() {
        let needle = label.to_lowercase();
        if needle.is_empty() {
            continue;
        }
        if let Some(pos) = hay.find(&needle) {
            let better = match best {
                None => true,
                Some((p, len, _)) => pos < p || (pos == p && needle.len() > len),
            };
            if better {
                best = Some((pos, needle.len(), i));
            }
        }
    }
    best.map(|(_, _, i)| i)
}
