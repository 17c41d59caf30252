//! Per-action semantic annotation along the eight label dimensions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{ActionRecord, ActionSpace, LabelMap};
use crate::error::{Error, Result};
use crate::labels::LabelDimension;
use crate::service::{GenerateRequest, TextService};

/// Keyword rules: for each dimension, labels tried in order with their
/// trigger words. Matching is on lowercased, punctuation-trimmed tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordRules {
    pub rules: BTreeMap<LabelDimension, Vec<(String, Vec<String>)>>,
}

/// A label and the keywords that select it.
type KeywordRow = (&'static str, &'static [&'static str]);

impl Default for KeywordRules {
    fn default() -> Self {
        use LabelDimension::*;
        let table: &[(LabelDimension, &[KeywordRow])] = &[
            (
                State,
                &[
                    (
                        "positive",
                        &[
                            "good",
                            "great",
                            "support",
                            "agree",
                            "true",
                            "confirmed",
                            "positive",
                            "love",
                        ],
                    ),
                    (
                        "negative",
                        &[
                            "bad", "fake", "false", "oppose", "disagree", "negative", "hate",
                            "wrong", "lie",
                        ],
                    ),
                ],
            ),
            (
                Stance,
                &[
                    ("support", &["support", "agree", "endorse", "back"]),
                    ("oppose", &["oppose", "disagree", "against", "reject"]),
                ],
            ),
            (
                Belief,
                &[(
                    "doubt",
                    &[
                        "doubt",
                        "fake",
                        "unverified",
                        "suspicious",
                        "really",
                        "hoax",
                    ],
                )],
            ),
            (
                Rumor,
                &[(
                    "spread",
                    &["share", "spread", "forward", "repost", "breaking"],
                )],
            ),
            (
                Subjectivity,
                &[(
                    "subjective",
                    &["i", "think", "feel", "believe", "my", "opinion"],
                )],
            ),
            (
                Intent,
                &[
                    ("question", &["why", "how", "what", "who", "when", "?"]),
                    (
                        "promotion",
                        &["share", "repost", "spread", "forward", "check"],
                    ),
                ],
            ),
            (
                Sentiment,
                &[
                    ("angry", &["angry", "outrage", "furious", "disgusting"]),
                    ("happy", &["happy", "glad", "great", "love", "joy"]),
                    ("sad", &["sad", "sorry", "tragic", "cry"]),
                    ("fear", &["afraid", "fear", "scared", "worried"]),
                    (
                        "surprise",
                        &["wow", "shocked", "surprising", "unbelievable"],
                    ),
                ],
            ),
            (
                Behavior,
                &[("share", &["repost", "share", "forward", "rt"])],
            ),
        ];
        let rules = table
            .iter()
            .map(|(dim, entries)| {
                let v = entries
                    .iter()
                    .map(|(l, kws)| (l.to_string(), kws.iter().map(|k| k.to_string()).collect()))
                    .collect();
                (*dim, v)
            })
            .collect();
        KeywordRules { rules }
    }
}

impl KeywordRules {
    fn tokens(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for raw in text.split_whitespace() {
            if raw.contains('?') {
                out.push("?".to_string());
            }
            let t = raw
                .trim_matches(|c: char| c.is_ascii_punctuation())
                .to_lowercase();
            if !t.is_empty() {
                out.push(t);
            }
        }
        out
    }

    /// Label every dimension from `text`; dimensions with no matching rule
    /// get their default label.
    pub fn apply(&self, text: &str) -> LabelMap {
        let tokens = Self::tokens(text);
        LabelDimension::ALL
            .into_iter()
            .map(|dim| {
                let hit = self.rules.get(&dim).and_then(|entries| {
                    entries
                        .iter()
                        .find(|(_, kws)| kws.iter().any(|k| tokens.iter().any(|t| t == k)))
                        .map(|(l, _)| l.clone())
                });
                (dim, hit.unwrap_or_else(|| dim.default_label().to_string()))
            })
            .collect()
    }
}

/// Where annotation labels come from.
pub enum AnnotatorBackend {
    /// Labels carried by the record, then the action's fixed profile, then
    /// per-dimension defaults.
    Native,
    RuleBased(KeywordRules),
    External(Box<dyn TextService>),
}

impl std::fmt::Debug for AnnotatorBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AnnotatorBackend::Native => f.write_str("Native"),
            AnnotatorBackend::RuleBased(_) => f.write_str("RuleBased"),
            AnnotatorBackend::External(_) => f.write_str("External"),
        }
    }
}

fn complete(labels: &LabelMap) -> bool {
    LabelDimension::ALL.iter().all(|d| labels.contains_key(d))
}

fn fill_defaults(mut labels: LabelMap, fallback: Option<&LabelMap>) -> LabelMap {
    for dim in LabelDimension::ALL {
        labels.entry(dim).or_insert_with(|| {
            let v = fallback
                .and_then(|f| f.get(&dim).cloned())
                .unwrap_or_else(|| dim.default_label().to_string());
            v
        });
    }
    labels
}

fn annotation_prompt(text: &str) -> String {
    let mut p = String::from(
        "Annotate the post below. Answer with one line per dimension as `dimension: label`.\n",
    );
    for dim in LabelDimension::ALL {
        p.push_str(&format!("{}: {}\n", dim.name(), dim.labels().join(" | ")));
    }
    p.push_str("Post: ");
    p.push_str(text);
    p
}

/// Parse `dimension: label` lines. Every dimension must be present with a
/// valid label.
pub fn parse_annotation(response: &str) -> Result<LabelMap> {
    let mut out = LabelMap::new();
    for line in response.lines() {
        let Some((k, v)) = line.split_once(':') else {
            continue;
        };
        let Ok(dim) = k
            .trim()
            .trim_matches(|c: char| !c.is_alphanumeric())
            .parse::<LabelDimension>()
        else {
            continue;
        };
        let v = v
            .trim()
            .trim_matches(|c: char| !c.is_alphanumeric())
            .to_lowercase();
        if dim.contains(&v) {
            out.entry(dim).or_insert(v);
        }
    }
    let missing: Vec<_> = LabelDimension::ALL
        .iter()
        .filter(|d| !out.contains_key(d))
        .map(|d| d.name())
        .collect();
    if missing.is_empty() {
        Ok(out)
    } else {
        Err(Error::Parse(format!(
            "annotation missing dimensions: {}",
            missing.join(", ")
        )))
    }
}

/// Labels for one action across all eight dimensions. Labels already on
/// the record always pass through unchanged.
pub fn annotate_action(
    action: &ActionRecord,
    space: &ActionSpace,
    backend: &AnnotatorBackend,
) -> Result<LabelMap> {
    let profile = (action.action_index < space.len()).then(|| space.profile(action.action_index));
    if let Some(labels) = &action.labels {
        if complete(labels) {
            return Ok(labels.clone());
        }
    }
    let own = action.labels.clone().unwrap_or_default();
    match backend {
        AnnotatorBackend::Native => Ok(fill_defaults(own, profile)),
        AnnotatorBackend::RuleBased(rules) => {
            let ruled = rules.apply(action.text.as_deref().unwrap_or(""));
            Ok(fill_defaults(own, Some(&ruled)))
        }
        AnnotatorBackend::External(service) => {
            let req = GenerateRequest {
                prompt: annotation_prompt(action.text.as_deref().unwrap_or("")),
                max_tokens: 64,
                temperature: 0.0,
                seed: None,
            };
            let parsed = parse_annotation(&service.generate(&req)?)?;
            Ok(fill_defaults(own, Some(&parsed)))
        }
    }
}
