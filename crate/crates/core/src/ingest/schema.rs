//! Event file format, version 1: one JSON document per event.
//!
//! ```json
//! {
//!   "schema_version": "1",
//!   "event_id": "e1",
//!   "topic": "...",
//!   "personas": {"u1": "profile text"},
//!   "states": {"labels": ["positive", "neutral", "negative"]},
//!   "action_space": [{"label": "share_positive", "labels": {"state": "positive"}}],
//!   "steps": [{
//!     "t": 0,
//!     "active": ["u1"],
//!     "signal": {"source": "s", "text": "..."},
//!     "actions": [{"agent": "u1", "action": "share_positive", "text": "...", "labels": {"state": "positive"}}],
//!     "m_star": [0.7, 0.15, 0.15]
//!   }]
//! }
//! ```
//!
//! `schema_version`, `states` (default positive/neutral/negative) and
//! `action_space` (default: the six share/comment actions) are optional.
//! `action` may be a label or an index into the action space.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::validate::{validate_event, Finding};
use crate::domain::{
    ActionRecord, ActionSpace, AgentPersona, EventStep, EventTimeline, ExogenousSignal, LabelMap,
    MeanField, StateSpace,
};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: &str = "1";

/// How unknown keys are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strictness {
    #[default]
    Strict,
    Lenient,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawEvent {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    schema_version: Option<String>,
    event_id: String,
    topic: String,
    personas: Map<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    states: Option<StateSpace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    action_space: Option<ActionSpace>,
    steps: Vec<RawStep>,
    #[serde(flatten, skip_serializing)]
    extra: Map<String, Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawStep {
    t: usize,
    active: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    signal: Option<RawSignal>,
    #[serde(default)]
    actions: Vec<RawAction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    m_star: Option<Vec<f64>>,
    #[serde(flatten, skip_serializing)]
    extra: Map<String, Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawSignal {
    source: String,
    text: String,
    #[serde(flatten, skip_serializing)]
    extra: Map<String, Value>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum ActionRef {
    Index(usize),
    Label(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct RawAction {
    agent: String,
    action: ActionRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<LabelMap>,
    #[serde(flatten, skip_serializing)]
    extra: Map<String, Value>,
}

fn classify(e: serde_json::Error) -> Error {
    use serde_json::error::Category;
    match e.classify() {
        Category::Data => Error::Schema(e.to_string()),
        _ => Error::Parse(e.to_string()),
    }
}

fn unknown_keys(raw: &RawEvent) -> Vec<String> {
    let mut out: Vec<String> = raw.extra.keys().map(|k| k.to_string()).collect();
    for (i, s) in raw.steps.iter().enumerate() {
        out.extend(s.extra.keys().map(|k| format!("steps[{i}].{k}")));
        if let Some(sig) = &s.signal {
            out.extend(sig.extra.keys().map(|k| format!("steps[{i}].signal.{k}")));
        }
        for (j, a) in s.actions.iter().enumerate() {
            out.extend(
                a.extra
                    .keys()
                    .map(|k| format!("steps[{i}].actions[{j}].{k}")),
            );
        }
    }
    out
}

/// Parse an event document. Returns the timeline and any warnings about
/// ignored keys (lenient mode only; strict mode rejects them).
pub fn parse_event(text: &str, strictness: Strictness) -> Result<(EventTimeline, Vec<String>)> {
    let raw: RawEvent = serde_json::from_str(text).map_err(classify)?;
    if let Some(v) = &raw.schema_version {
        if v != SCHEMA_VERSION {
            return Err(Error::Schema(format!("unsupported schema_version `{v}`")));
        }
    }
    let unknown = unknown_keys(&raw);
    if !unknown.is_empty() && strictness == Strictness::Strict {
        return Err(Error::Schema(format!(
            "unknown keys: {}",
            unknown.join(", ")
        )));
    }
    let warnings: Vec<String> = unknown
        .into_iter()
        .map(|k| format!("ignored unknown key `{k}`"))
        .collect();
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok((from_raw(raw)?, warnings))
}

fn from_raw(raw: RawEvent) -> Result<EventTimeline> {
    let states = raw.states.unwrap_or_default();
    let actions = raw.action_space.unwrap_or_default();
    let mut findings = Vec::new();
    let mut personas = Vec::with_capacity(raw.personas.len());
    for (id, profile) in raw.personas {
        let Value::String(profile) = profile else {
            return Err(Error::Schema(format!(
                "persona `{id}` profile must be a string"
            )));
        };
        personas.push(AgentPersona {
            agent_id: id,
            profile,
        });
    }
    let mut steps = Vec::with_capacity(raw.steps.len());
    for s in raw.steps {
        let mut recs = Vec::with_capacity(s.actions.len());
        for a in s.actions {
            let action_index = match &a.action {
                ActionRef::Index(i) => *i,
                ActionRef::Label(l) => match actions.index_of(l) {
                    Some(i) => i,
                    None => {
                        findings.push(Finding::at(
                            s.t,
                            format!("unknown action `{l}` by `{}`", a.agent),
                        ));
                        continue;
                    }
                },
            };
            recs.push(ActionRecord {
                agent_id: a.agent,
                timestep: s.t,
                action_index,
                text: a.text,
                labels: a.labels,
            });
        }
        let empirical_mean_field = match s.m_star {
            Some(v) => match MeanField::new(v) {
                Ok(m) => Some(m),
                Err(e) => {
                    findings.push(Finding::at(s.t, format!("m_star: {e}")));
                    None
                }
            },
            None => None,
        };
        steps.push(EventStep {
            t: s.t,
            active: s.active,
            actions: recs,
            signal: s.signal.map(|sig| ExogenousSignal {
                source_id: sig.source,
                text: sig.text,
                timestep: s.t,
            }),
            empirical_mean_field,
        });
    }
    let timeline = EventTimeline {
        event_id: raw.event_id,
        topic: raw.topic,
        personas,
        steps,
        states,
        actions,
    };
    findings.extend(validate_event(&timeline));
    if findings.is_empty() {
        Ok(timeline)
    } else {
        Err(Error::Validation(
            findings.iter().map(ToString::to_string).collect(),
        ))
    }
}

/// Render a timeline as a version-1 document.
pub fn to_json(timeline: &EventTimeline) -> Result<String> {
    let raw = RawEvent {
        schema_version: Some(SCHEMA_VERSION.into()),
        event_id: timeline.event_id.clone(),
        topic: timeline.topic.clone(),
        personas: timeline
            .personas
            .iter()
            .map(|p| (p.agent_id.clone(), Value::String(p.profile.clone())))
            .collect(),
        states: Some(timeline.states.clone()),
        action_space: Some(timeline.actions.clone()),
        steps: timeline
            .steps
            .iter()
            .map(|s| RawStep {
                t: s.t,
                active: s.active.clone(),
                signal: s.signal.as_ref().map(|sig| RawSignal {
                    source: sig.source_id.clone(),
                    text: sig.text.clone(),
                    extra: Map::new(),
                }),
                actions: s
                    .actions
                    .iter()
                    .map(|a| RawAction {
                        agent: a.agent_id.clone(),
                        action: if a.action_index < timeline.actions.len() {
                            ActionRef::Label(timeline.actions.label(a.action_index).to_string())
                        } else {
                            ActionRef::Index(a.action_index)
                        },
                        text: a.text.clone(),
                        labels: a.labels.clone(),
                        extra: Map::new(),
                    })
                    .collect(),
                m_star: s.empirical_mean_field.as_ref().map(|m| m.probs().to_vec()),
                extra: Map::new(),
            })
            .collect(),
        extra: Map::new(),
    };
    serde_json::to_string_pretty(&raw).map_err(|e| Error::Parse(e.to_string()))
}

pub fn load_event_with(
    path: impl AsRef<Path>,
    strictness: Strictness,
) -> Result<(EventTimeline, Vec<String>)> {
    let text = std::fs::read_to_string(path)?;
    parse_event(&text, strictness)
}

/// Load and validate a strict version-1 event file.
pub fn load_event(path: impl AsRef<Path>) -> Result<EventTimeline> {
    load_event_with(path, Strictness::Strict).map(|(t, _)| t)
}

pub fn save_event(timeline: &EventTimeline, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_json(timeline)?)?;
    Ok(())
}
