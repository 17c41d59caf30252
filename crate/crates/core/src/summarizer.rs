//! The textual macro channel: turns the previous synopsis, the current mean
//! field, the step's actions and any signal into the next synopsis.

use serde::{Deserialize, Serialize};

use crate::domain::{
    majority_state, ActionRecord, ActionSpace, ExogenousSignal, MeanField, StateSpace, Synopsis,
};
use crate::error::Result;
use crate::service::{GenerateRequest, TextService};

pub const DEFAULT_TOKEN_BUDGET: usize = 128;
const SIGNAL_DIGEST_TOKENS: usize = 20;

/// Whole percent, half rounded up.
pub fn percent_half_up(p: f64) -> u32 {
    // The nudge keeps values like 0.285 (stored as 28.4999..) on the upper side.
    (p * 100.0 + 0.5 + 1e-9).floor().max(0.0) as u32
}

fn strip_terminators(s: &str) -> String {
    s.chars()
        .map(|c| if matches!(c, '.' | '!' | '?') { ' ' } else { c })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Deterministic renderer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSummarizer {
    pub topic: String,
    pub states: StateSpace,
    pub actions: ActionSpace,
    pub token_budget: usize,
}

impl TemplateSummarizer {
    pub fn new(topic: impl Into<String>, states: StateSpace, actions: ActionSpace) -> Self {
        TemplateSummarizer {
            topic: topic.into(),
            states,
            actions,
            token_budget: DEFAULT_TOKEN_BUDGET,
        }
    }

    /// Action labels with their counts, in action-space order, zeros omitted.
    pub fn action_counts(&self, actions: &[ActionRecord]) -> Vec<(String, usize)> {
        let mut counts = vec![0usize; self.actions.len()];
        for a in actions {
            if let Some(c) = counts.get_mut(a.action_index) {
                *c += 1;
            }
        }
        counts
            .into_iter()
            .enumerate()
            .filter(|(_, c)| *c > 0)
            .map(|(i, c)| (self.actions.label(i).to_string(), c))
            .collect()
    }

    /// Topic echo with the top state; the first sentence of every synopsis.
    pub fn headline(&self, m: &MeanField) -> String {
        let top = majority_state(m);
        format!(
            "{} | top state {} {}%.",
            strip_terminators(&self.topic),
            self.states.label(top),
            percent_half_up(m.get(top))
        )
    }

    pub fn summarize(
        &self,
        r_prev: &Synopsis,
        m: &MeanField,
        actions: &[ActionRecord],
        signal: Option<&ExogenousSignal>,
    ) -> Synopsis {
        let mut text = self.headline(m);
        let counts = self.action_counts(actions);
        if counts.is_empty() {
            text.push_str(" actions: none.");
        } else {
            let list: Vec<String> = counts.iter().map(|(l, c)| format!("{l} {c}")).collect();
            text.push_str(&format!(" actions: {}.", list.join(", ")));
        }
        if let Some(sig) = signal {
            let digest: Vec<&str> = sig
                .text
                .split_whitespace()
                .take(SIGNAL_DIGEST_TOKENS)
                .collect();
            text.push_str(&format!(
                " signal from {}: {}.",
                sig.source_id,
                digest.join(" ")
            ));
        }
        let prev = r_prev.first_sentence().trim();
        if !prev.is_empty() {
            text.push_str(" earlier: ");
            text.push_str(prev);
        }
        Synopsis::new(text, self.token_budget)
    }
}

/// Synopsis backend.
pub enum Summarizer {
    Template(TemplateSummarizer),
    External {
        service: Box<dyn TextService>,
        template: TemplateSummarizer,
        /// Use the template renderer when the service fails.
        fallback: bool,
    },
}

impl Summarizer {
    pub fn template(&self) -> &TemplateSummarizer {
        match self {
            Summarizer::Template(t) => t,
            Summarizer::External { template, .. } => template,
        }
    }

    pub fn token_budget(&self) -> usize {
        self.template().token_budget
    }

    pub fn summarize(
        &self,
        r_prev: &Synopsis,
        m: &MeanField,
        actions: &[ActionRecord],
        signal: Option<&ExogenousSignal>,
    ) -> Result<Synopsis> {
        match self {
            Summarizer::Template(t) => Ok(t.summarize(r_prev, m, actions, signal)),
            Summarizer::External {
                service,
                template,
                fallback,
            } => {
                let req = GenerateRequest {
                    prompt: external_prompt(template, r_prev, m, actions, signal),
                    max_tokens: template.token_budget as u32,
                    temperature: 0.0,
                    seed: None,
                };
                match service.generate(&req) {
                    Ok(text) => Ok(Synopsis::new(text, template.token_budget)),
                    Err(_) if *fallback => Ok(template.summarize(r_prev, m, actions, signal)),
                    Err(e) => Err(e),
                }
            }
        }
    }
}

fn external_prompt(
    t: &TemplateSummarizer,
    r_prev: &Synopsis,
    m: &MeanField,
    actions: &[ActionRecord],
    signal: Option<&ExogenousSignal>,
) -> String {
    let dist: Vec<String> = t
        .states
        .labels()
        .iter()
        .zip(m.probs())
        .map(|(l, p)| format!("{l} {}%", percent_half_up(*p)))
        .collect();
    let counts: Vec<String> = t
        .action_counts(actions)
        .iter()
        .map(|(l, c)| format!("{l} {c}"))
        .collect();
    format!(
        "Update the running summary of the discussion about \"{}\" in at most {} words.\n\
         Previous summary: {}\nState distribution: {}\nActions this step: {}\nNew signal: {}\nSummary:",
        t.topic,
        t.token_budget,
        r_prev.text(),
        dist.join(", "),
        if counts.is_empty() { "none".into() } else { counts.join(", ") },
        signal.map(|s| s.text.as_str()).unwrap_or("none"),
    )
}
