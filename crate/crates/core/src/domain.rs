//! Domain types shared by every module: state and action spaces, simplex
//! distributions, agents, signals, event timelines and trajectories.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelDimension;

/// Absolute tolerance for simplex membership.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Ordered set of discrete state labels. The order defines the simplex axes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "StateSpaceRepr", into = "StateSpaceRepr")]
pub struct StateSpace {
    labels: Vec<String>,
    /// Optional coarse-bucket map: fine label -> one of `labels`.
    merge: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct StateSpaceRepr {
    labels: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    merge: BTreeMap<String, String>,
}

impl TryFrom<StateSpaceRepr> for StateSpace {
    type Error = Error;

    fn try_from(r: StateSpaceRepr) -> Result<Self> {
        StateSpace::new(r.labels)?.with_merge(r.merge)
    }
}

impl From<StateSpace> for StateSpaceRepr {
    fn from(s: StateSpace) -> Self {
        StateSpaceRepr {
            labels: s.labels,
            merge: s.merge,
        }
    }
}

fn unique_labels<I, S>(labels: I, what: &str) -> Result<Vec<String>>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
    if labels.is_empty() {
        return Err(Error::InvalidSpace(format!("{what} must be non-empty")));
    }
    let mut seen = BTreeSet::new();
    for l in &labels {
        if !seen.insert(l.as_str()) {
            return Err(Error::InvalidSpace(format!("duplicate {what} label `{l}`")));
        }
    }
    Ok(labels)
}

impl StateSpace {
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Ok(StateSpace {
            labels: unique_labels(labels, "state")?,
            merge: BTreeMap::new(),
        })
    }

    /// (positive, neutral, negative).
    pub fn polarity() -> Self {
        StateSpace::new(["positive", "neutral", "negative"]).expect("static labels")
    }

    /// Attach a coarse-bucket map. Every target must be one of the labels.
    pub fn with_merge(mut self, merge: BTreeMap<String, String>) -> Result<Self> {
        for (fine, coarse) in &merge {
            if !self.labels.contains(coarse) {
                return Err(Error::InvalidSpace(format!(
                    "merge target `{coarse}` (from `{fine}`) is not a state label"
                )));
            }
        }
        self.merge = merge;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    /// Index of `label`, resolving coarse-bucket aliases first.
    pub fn index_of(&self, label: &str) -> Option<usize> {
        let label = self.merge.get(label).map(String::as_str).unwrap_or(label);
        self.labels.iter().position(|l| l == label)
    }
}

impl Default for StateSpace {
    fn default() -> Self {
        StateSpace::polarity()
    }
}

/// Per-action annotation profile: dimension -> label.
pub type LabelMap = BTreeMap<LabelDimension, String>;

/// Ordered set of action labels, each optionally carrying a fixed annotation
/// profile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ActionSpaceRepr", into = "ActionSpaceRepr")]
pub struct ActionSpace {
    labels: Vec<String>,
    profiles: Vec<LabelMap>,
}

#[derive(Serialize, Deserialize)]
struct ActionEntry {
    label: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    labels: LabelMap,
}

#[derive(Serialize, Deserialize)]
#[serde(transparent)]
struct ActionSpaceRepr(Vec<ActionEntry>);

impl TryFrom<ActionSpaceRepr> for ActionSpace {
    type Error = Error;

    fn try_from(r: ActionSpaceRepr) -> Result<Self> {
        let (labels, profiles): (Vec<_>, Vec<_>) =
            r.0.into_iter().map(|e| (e.label, e.labels)).unzip();
        ActionSpace::with_profiles(labels, profiles)
    }
}

impl From<ActionSpace> for ActionSpaceRepr {
    fn from(a: ActionSpace) -> Self {
        ActionSpaceRepr(
            a.labels
                .into_iter()
                .zip(a.profiles)
                .map(|(label, labels)| ActionEntry { label, labels })
                .collect(),
        )
    }
}

impl ActionSpace {
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels = unique_labels(labels, "action")?;
        let profiles = vec![LabelMap::new(); labels.len()];
        Ok(ActionSpace { labels, profiles })
    }

    pub fn with_profiles(labels: Vec<String>, profiles: Vec<LabelMap>) -> Result<Self> {
        let labels = unique_labels(labels, "action")?;
        if profiles.len() != labels.len() {
            return Err(Error::InvalidSpace(
                "one profile per action required".into(),
            ));
        }
        for (label, profile) in labels.iter().zip(&profiles) {
            for (dim, value) in profile {
                if !dim.contains(value) {
                    return Err(Error::UnknownLabel {
                        label: value.clone(),
                        context: format!("dimension {dim} of action `{label}`"),
                    });
                }
            }
        }
        Ok(ActionSpace { labels, profiles })
    }

    /// Six actions: {share, comment} x {positive, neutral, negative}, each with
    /// a full eight-dimension profile.
    pub fn social() -> Self {
        let mut labels = Vec::new();
        let mut profiles = Vec::new();
        for polarity in ["positive", "neutral", "negative"] {
            for behavior in ["share", "comment"] {
                labels.push(format!("{behavior}_{polarity}"));
                let (rumor, sentiment, stance, belief, subjectivity) = match polarity {
                    "positive" => ("spread", "happy", "support", "believe", "subjective"),
                    "neutral" => ("counter", "calm", "neutral", "believe", "objective"),
                    _ => ("counter", "angry", "oppose", "doubt", "subjective"),
                };
                let intent = match (behavior, polarity) {
                    ("share", _) => "promotion",
                    (_, "neutral") => "question",
                    _ => "opinion",
                };
                let p: LabelMap = [
                    (LabelDimension::Rumor, rumor),
                    (LabelDimension::Sentiment, sentiment),
                    (LabelDimension::State, polarity),
                    (LabelDimension::Behavior, behavior),
                    (LabelDimension::Stance, stance),
                    (LabelDimension::Belief, belief),
                    (LabelDimension::Subjectivity, subjectivity),
                    (LabelDimension::Intent, intent),
                ]
                .into_iter()
                .map(|(d, l)| (d, l.to_string()))
                .collect();
                profiles.push(p);
            }
        }
        ActionSpace::with_profiles(labels, profiles).expect("static profiles")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn profile(&self, index: usize) -> &LabelMap {
        &self.profiles[index]
    }

    /// State index of an action via its profile's `state` label, if any.
    pub fn state_of(&self, index: usize, states: &StateSpace) -> Option<usize> {
        self.profiles[index]
            .get(&LabelDimension::State)
            .and_then(|l| states.index_of(l))
    }
}

impl Default for ActionSpace {
    fn default() -> Self {
        ActionSpace::social()
    }
}

/// A point on the probability simplex over a [`StateSpace`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MeanField {
    probs: Vec<f64>,
}

impl TryFrom<Vec<f64>> for MeanField {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        MeanField::new(v)
    }
}

impl From<MeanField> for Vec<f64> {
    fn from(m: MeanField) -> Self {
        m.probs
    }
}

impl MeanField {
    /// Validate a probability vector. Entries in `[-1e-9, 0)` are clamped to
    /// zero and the vector renormalized; anything further off is rejected.
    pub fn new(mut probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidMeanField("empty vector".into()));
        }
        let mut clamped = false;
        for p in probs.iter_mut() {
            if !p.is_finite() {
                return Err(Error::InvalidMeanField(format!("non-finite entry {p}")));
            }
            if *p < 0.0 {
                if *p < -SIMPLEX_TOL {
                    return Err(Error::InvalidMeanField(format!("negative entry {p}")));
                }
                *p = 0.0;
                clamped = true;
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidMeanField(format!("entries sum to {sum}")));
        }
        if clamped {
            probs.iter_mut().for_each(|p| *p /= sum);
        }
        Ok(MeanField { probs })
    }

    /// Normalize non-negative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if weights.is_empty() || !sum.is_finite() || sum <= 0.0 || weights.iter().any(|w| *w < 0.0)
        {
            return Err(Error::InvalidMeanField(format!(
                "cannot normalize weights {weights:?}"
            )));
        }
        MeanField::new(weights.iter().map(|w| w / sum).collect())
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform mean field needs at least one state");
        MeanField {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn one_hot(n: usize, index: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[index] = 1.0;
        MeanField { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.probs[index]
    }
}

/// Smallest index attaining the maximum probability.
pub fn majority_state(m: &MeanField) -> usize {
    let mut best = 0;
    for (i, &p) in m.probs().iter().enumerate().skip(1) {
        if p > m.probs()[best] {
            best = i;
        }
    }
    best
}

/// Bounded natural-language summary of the collective trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Synopsis {
    text: String,
    token_budget: usize,
}

impl Synopsis {
    /// Build a synopsis, truncating `text` to at most `token_budget`
    /// whitespace tokens.
    pub fn new(text: impl AsRef<str>, token_budget: usize) -> Self {
        let text = text.as_ref();
        let text = if text.split_whitespace().count() > token_budget {
            text.split_whitespace()
                .take(token_budget)
                .collect::<Vec<_>>()
                .join(" ")
        } else {
            text.to_string()
        };
        Synopsis { text, token_budget }
    }

    pub fn empty(token_budget: usize) -> Self {
        Synopsis {
            text: String::new(),
            token_budget,
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn token_budget(&self) -> usize {
        self.token_budget
    }

    pub fn token_count(&self) -> usize {
        self.text.split_whitespace().count()
    }

    /// Text up to and including the first sentence terminator.
    pub fn first_sentence(&self) -> &str {
        match self.text.find(['.', '!', '?']) {
            Some(i) => &self.text[..=i],
            None => &self.text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentPersona {
    pub agent_id: String,
    pub profile: String,
}

/// Index of an agent's micro state into the [`StateSpace`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentState {
    state_index: usize,
}

impl AgentState {
    pub fn new(state_index: usize, space: &StateSpace) -> Result<Self> {
        if state_index >= space.len() {
            return Err(Error::InvalidSpace(format!(
                "state index {state_index} out of range for {} states",
                space.len()
            )));
        }
        Ok(AgentState { state_index })
    }

    pub fn index(self) -> usize {
        self.state_index
    }
}

/// Broadcast message from a designated information source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExogenousSignal {
    pub source_id: String,
    pub text: String,
    pub timestep: usize,
}

/// Everything an agent conditions on at one step.
#[derive(Debug, Clone, Copy)]
pub struct MicroState<'a> {
    pub state: AgentState,
    pub synopsis: &'a Synopsis,
    pub mean_field: &'a MeanField,
    pub signal: Option<&'a ExogenousSignal>,
    pub persona: &'a AgentPersona,
}

/// One realised action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub agent_id: String,
    pub timestep: usize,
    pub action_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<LabelMap>,
}

impl ActionRecord {
    pub fn label(&self, dim: LabelDimension) -> Option<&str> {
        self.labels.as_ref()?.get(&dim).map(String::as_str)
    }
}

/// Normalized histogram of the actions' labels along `dimension`, over the
/// labels of `space`.
pub fn empirical_distribution(
    actions: &[ActionRecord],
    dimension: LabelDimension,
    space: &StateSpace,
) -> Result<MeanField> {
    if actions.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let mut counts = vec![0usize; space.len()];
    for a in actions {
        let label = a.label(dimension).ok_or_else(|| Error::MissingLabel {
            agent: a.agent_id.clone(),
            timestep: a.timestep,
            dimension: dimension.name().into(),
        })?;
        let idx = space.index_of(label).ok_or_else(|| Error::UnknownLabel {
            label: label.into(),
            context: format!("dimension {dimension}"),
        })?;
        counts[idx] += 1;
    }
    let n = actions.len() as f64;
    MeanField::new(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// One step of an event timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventStep {
    pub t: usize,
    pub active: Vec<String>,
    pub actions: Vec<ActionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal: Option<ExogenousSignal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub empirical_mean_field: Option<MeanField>,
}

/// Ordered per-step records of one social event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTimeline {
    pub event_id: String,
    pub topic: String,
    pub personas: Vec<AgentPersona>,
    pub steps: Vec<EventStep>,
    pub states: StateSpace,
    pub actions: ActionSpace,
}

impl EventTimeline {
    /// Number of recorded steps.
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn persona(&self, agent_id: &str) -> Option<&AgentPersona> {
        self.personas.iter().find(|p| p.agent_id == agent_id)
    }

    /// Ground-truth mean field of every step, or the first missing step.
    pub fn mean_fields(&self) -> Result<Vec<&MeanField>> {
        self.steps
            .iter()
            .map(|s| {
                s.empirical_mean_field
                    .as_ref()
                    .ok_or_else(|| Error::MissingGroundTruth {
                        event: self.event_id.clone(),
                        timestep: s.t,
                    })
            })
            .collect()
    }

    /// Initial distributional channel: the first recorded mean field, else
    /// the first step's action State histogram, else uniform.
    pub fn initial_mean_field(&self) -> MeanField {
        let Some(first) = self.steps.first() else {
            return MeanField::uniform(self.states.len());
        };
        if let Some(m) = &first.empirical_mean_field {
            return m.clone();
        }
        empirical_distribution(&first.actions, LabelDimension::State, &self.states)
            .unwrap_or_else(|_| MeanField::uniform(self.states.len()))
    }
}

/// One simulated step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub t: usize,
    pub mean_field: MeanField,
    pub synopsis: String,
    pub actions: Vec<ActionRecord>,
}

/// Simulated sequence of macro states and actions; record 0 is the initial
/// condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub event_id: String,
    pub records: Vec<TrajectoryRecord>,
}

impl Trajectory {
    /// Number of simulated steps (records minus the initial one).
    pub fn horizon(&self) -> usize {
        self.records.len().saturating_sub(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labelled(state: &str, t: usize) -> ActionRecord {
        ActionRecord {
            agent_id: format!("a{t}"),
            timestep: t,
            action_index: 0,
            text: None,
            labels: Some(
                [(LabelDimension::State, state.to_string())]
                    .into_iter()
                    .collect(),
            ),
        }
    }

    fn pnn() -> StateSpace {
        StateSpace::new(["pos", "neu", "neg"]).unwrap()
    }

    #[test]
    fn histogram_counts_labels() {
        let acts: Vec<_> = ["pos", "pos", "neu", "neg"]
            .iter()
            .map(|s| labelled(s, 1))
            .collect();
        let m = empirical_distribution(&acts, LabelDimension::State, &pnn()).unwrap();
        assert_eq!(m.probs(), &[0.5, 0.25, 0.25]);

        let acts: Vec<_> = (0..5).map(|_| labelled("neu", 1)).collect();
        let m = empirical_distribution(&acts, LabelDimension::State, &pnn()).unwrap();
        assert_eq!(m.probs(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn histogram_errors() {
        assert!(matches!(
            empirical_distribution(&[], LabelDimension::State, &pnn()),
            Err(Error::EmptyWindow)
        ));
        let mut a = labelled("pos", 3);
        a.labels = None;
        assert!(matches!(
            empirical_distribution(&[a], LabelDimension::State, &pnn()),
            Err(Error::MissingLabel { timestep: 3, .. })
        ));
    }

    #[test]
    fn merge_maps_fine_labels_into_buckets() {
        let space = pnn()
            .with_merge(
                [("joyful".to_string(), "pos".to_string())]
                    .into_iter()
                    .collect(),
            )
            .unwrap();
        assert_eq!(space.index_of("joyful"), Some(0));
        assert!(pnn()
            .with_merge([("x".into(), "nope".into())].into_iter().collect())
            .is_err());
    }

    #[test]
    fn majority_ties_go_to_lowest_index() {
        let m = |v: Vec<f64>| MeanField::new(v).unwrap();
        assert_eq!(majority_state(&m(vec![0.2, 0.5, 0.3])), 1);
        assert_eq!(majority_state(&m(vec![0.5, 0.5, 0.0])), 0);
        assert_eq!(majority_state(&m(vec![0.0, 0.0, 1.0])), 2);
        assert_eq!(majority_state(&MeanField::uniform(3)), 0);
    }

    #[test]
    fn mean_field_tolerance_rules() {
        let m = MeanField::new(vec![1.0 + 5e-10, -5e-10]).unwrap();
        assert_eq!(m.probs()[1], 0.0);
        assert!((m.probs().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(MeanField::new(vec![1.1, -0.1]).is_err());
        assert!(MeanField::new(vec![0.5, 0.4]).is_err());
        assert!(MeanField::new(vec![f64::NAN, 1.0]).is_err());
        assert!(MeanField::new(vec![]).is_err());
        assert!(serde_json::from_str::<MeanField>("[0.9]").is_err());
    }

    #[test]
    fn spaces_reject_duplicates() {
        assert!(StateSpace::new(["a", "a"]).is_err());
        assert!(StateSpace::new(Vec::<String>::new()).is_err());
        assert!(ActionSpace::new(["x", "x"]).is_err());
        let social = ActionSpace::social();
        assert_eq!(social.len(), 6);
        assert_eq!(social.state_of(5, &StateSpace::polarity()), Some(2));
    }

    #[test]
    fn synopsis_truncates_to_budget() {
        let s = Synopsis::new("one two three four five", 3);
        assert_eq!(s.text(), "one two three");
        assert_eq!(s.token_count(), 3);
        assert_eq!(
            Synopsis::new("Topic: x. More.", 10).first_sentence(),
            "Topic: x."
        );
    }

    proptest! {
        #[test]
        fn histogram_is_permutation_invariant(
            idx in proptest::collection::vec(0usize..3, 1..40),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let names = ["pos", "neu", "neg"];
            let acts: Vec<_> = idx.iter().map(|&i| labelled(names[i], 1)).collect();
            let mut shuffled = acts.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = empirical_distribution(&acts, LabelDimension::State, &pnn()).unwrap();
            let b = empirical_distribution(&shuffled, LabelDimension::State, &pnn()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn majority_is_scale_invariant(
            w in proptest::collection::vec(0.0f64..10.0, 1..8),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(w.iter().sum::<f64>() > 1e-6);
            let m = MeanField::from_weights(&w).unwrap();
            let scaled: Vec<f64> = m.probs().iter().map(|p| p * c).collect();
            let m2 = MeanField::from_weights(&scaled).unwrap();
            prop_assert_eq!(majority_state(&m), majority_state(&m2));
        }

        #[test]
        fn mean_field_serde_is_bit_exact(w in proptest::collection::vec(0.0f64..1.0, 1..10)) {
            prop_assume!(w.iter().sum::<f64>() > 1e-6);
            let m = MeanField::from_weights(&w).unwrap();
            let back: MeanField = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
            for (a, b) in m.probs().iter().zip(back.probs()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
