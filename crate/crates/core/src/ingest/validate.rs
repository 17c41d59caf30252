//! Structural checks on event timelines.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::domain::EventTimeline;

/// One invariant violation; `t` is the offending step's timestep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub t: Option<usize>,
    pub message: String,
}

impl Finding {
    pub fn at(t: usize, message: impl Into<String>) -> Self {
        Finding {
            t: Some(t),
            message: message.into(),
        }
    }

    pub fn event(message: impl Into<String>) -> Self {
        Finding {
            t: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.t {
            Some(t) => write!(f, "t={t}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Every violated invariant, in step order. Empty iff the timeline is valid.
pub fn validate_event(ev: &EventTimeline) -> Vec<Finding> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for p in &ev.personas {
        if !ids.insert(p.agent_id.as_str()) {
            out.push(Finding::event(format!(
                "duplicate persona `{}`",
                p.agent_id
            )));
        }
    }
    let n_states = ev.states.len();
    for (k, step) in ev.steps.iter().enumerate() {
        let t = step.t;
        match k {
            0 if t > 1 => out.push(Finding::at(t, "first step must be t=0 or t=1")),
            0 => {}
            _ if t != ev.steps[k - 1].t + 1 => out.push(Finding::at(
                t,
                format!(
                    "expected t={} after t={}",
                    ev.steps[k - 1].t + 1,
                    ev.steps[k - 1].t
                ),
            )),
            _ => {}
        }
        let mut active = HashSet::new();
        for a in &step.active {
            if !active.insert(a.as_str()) {
                out.push(Finding::at(
                    t,
                    format!("agent `{a}` listed twice in active set"),
                ));
            }
            if !ids.contains(a.as_str()) {
                out.push(Finding::at(t, format!("active agent `{a}` has no persona")));
            }
        }
        if step.active.len() > ev.personas.len() {
            out.push(Finding::at(
                t,
                format!(
                    "{} active agents exceed pool of {}",
                    step.active.len(),
                    ev.personas.len()
                ),
            ));
        }
        for a in &step.actions {
            if !active.contains(a.agent_id.as_str()) {
                out.push(Finding::at(
                    t,
                    format!("action by `{}` who is not active", a.agent_id),
                ));
            }
            if a.timestep != t {
                out.push(Finding::at(
                    t,
                    format!("action by `{}` stamped t={}", a.agent_id, a.timestep),
                ));
            }
            if a.action_index >= ev.actions.len() {
                out.push(Finding::at(
                    t,
                    format!("action index {} out of range", a.action_index),
                ));
            }
            for (dim, label) in a.labels.iter().flatten() {
                if !dim.contains(label) {
                    out.push(Finding::at(
                        t,
                        format!("label `{label}` not valid for {dim}"),
                    ));
                }
            }
        }
        if let Some(sig) = &step.signal {
            if sig.timestep != t {
                out.push(Finding::at(t, format!("signal stamped t={}", sig.timestep)));
            }
        }
        if let Some(m) = &step.empirical_mean_field {
            if m.len() != n_states {
                out.push(Finding::at(
                    t,
                    format!("m_star has {} entries for {n_states} states", m.len()),
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ActionRecord, ActionSpace, AgentPersona, EventStep, StateSpace};

    fn event(ts: &[usize]) -> EventTimeline {
        EventTimeline {
            event_id: "e".into(),
            topic: "x".into(),
            personas: vec![AgentPersona {
                agent_id: "a".into(),
                profile: String::new(),
            }],
            steps: ts
                .iter()
                .map(|&t| EventStep {
                    t,
                    active: vec!["a".into()],
                    actions: vec![ActionRecord {
                        agent_id: "a".into(),
                        timestep: t,
                        action_index: 0,
                        text: None,
                        labels: None,
                    }],
                    signal: None,
                    empirical_mean_field: None,
                })
                .collect(),
            states: StateSpace::polarity(),
            actions: ActionSpace::social(),
        }
    }

    #[test]
    fn valid_timeline_has_no_findings() {
        assert!(validate_event(&event(&[0, 1, 2])).is_empty());
    }

    #[test]
    fn gap_is_reported_at_the_later_step() {
        let f = validate_event(&event(&[0, 1, 3]));
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].t, Some(3));
    }

    #[test]
    fn inactive_actor_is_reported() {
        let mut ev = event(&[0, 1]);
        ev.steps[1].actions[0].agent_id = "b".into();
        let f = validate_event(&ev);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].t, Some(1));
    }
}
