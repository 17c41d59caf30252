//! Synthetic events whose ground-truth mean field switches majority at
//! chosen steps, with agent actions sampled from it.

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{
    ActionRecord, ActionSpace, AgentPersona, EventStep, EventTimeline, ExogenousSignal, MeanField,
    StateSpace,
};
use crate::error::{Error, Result};
use crate::rng::substream;

fn default_majority_share() -> f64 {
    0.7
}

fn default_true() -> bool {
    true
}

fn default_topic() -> String {
    "viral claim about the city water supply".into()
}

/// A single reversal from `pre_majority` to `post_majority` at `flip_step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReversalSpec {
    pub horizon: usize,
    pub flip_step: usize,
    pub pre_majority: usize,
    pub post_majority: usize,
    /// Probability mass moved toward the new regime per step.
    pub drift_rate: f64,
    pub agents_per_step: usize,
    pub pool_size: usize,
    /// Standard deviation of the additive noise on the mean field.
    pub noise: f64,
    /// Mass of the majority state in a settled regime; the rest is split
    /// evenly.
    #[serde(default = "default_majority_share")]
    pub majority_share: f64,
    pub seed: u64,
    #[serde(default = "default_topic")]
    pub topic: String,
    /// Attach text and native labels to every action.
    #[serde(default = "default_true")]
    pub annotate: bool,
}

impl ReversalSpec {
    /// Defaults for everything except the reversal itself.
    pub fn new(
        horizon: usize,
        flip_step: usize,
        pre_majority: usize,
        post_majority: usize,
        seed: u64,
    ) -> Self {
        ReversalSpec {
            horizon,
            flip_step,
            pre_majority,
            post_majority,
            drift_rate: 0.1,
            agents_per_step: 20,
            pool_size: 40,
            noise: 0.02,
            majority_share: default_majority_share(),
            seed,
            topic: default_topic(),
            annotate: true,
        }
    }

    fn to_regimes(&self) -> RegimeSpec {
        RegimeSpec {
            horizon: self.horizon,
            initial_majority: self.pre_majority,
            flips: if self.flip_step < self.horizon {
                vec![Flip {
                    step: self.flip_step,
                    majority: self.post_majority,
                }]
            } else {
                Vec::new()
            },
            drift_rate: self.drift_rate,
            agents_per_step: self.agents_per_step,
            pool_size: self.pool_size,
            noise: self.noise,
            majority_share: self.majority_share,
            seed: self.seed,
            event_id: format!("reversal-{}", self.seed),
            topic: self.topic.clone(),
            annotate: self.annotate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flip {
    pub step: usize,
    pub majority: usize,
}

/// A sequence of majority regimes, for long-horizon events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub horizon: usize,
    pub initial_majority: usize,
    pub flips: Vec<Flip>,
    pub drift_rate: f64,
    pub agents_per_step: usize,
    pub pool_size: usize,
    pub noise: f64,
    #[serde(default = "default_majority_share")]
    pub majority_share: f64,
    pub seed: u64,
    pub event_id: String,
    #[serde(default = "default_topic")]
    pub topic: String,
    #[serde(default = "default_true")]
    pub annotate: bool,
}

impl RegimeSpec {
    fn validate(&self, n_states: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if !(self.drift_rate > 0.0 && self.drift_rate <= 1.0) {
            return bad(format!("drift_rate {} outside (0, 1]", self.drift_rate));
        }
        if self.agents_per_step == 0 || self.agents_per_step > self.pool_size {
            return bad(format!(
                "agents_per_step {} must be in 1..={}",
                self.agents_per_step, self.pool_size
            ));
        }
        let other = (1.0 - self.majority_share) / (n_states - 1) as f64;
        if !(self.majority_share > other && self.majority_share <= 1.0) {
            return bad(format!(
                "majority_share {} does not dominate",
                self.majority_share
            ));
        }
        if !(self.noise >= 0.0) || 4.0 * self.noise >= self.majority_share - other {
            return bad(format!(
                "noise {} can overturn a settled majority",
                self.noise
            ));
        }
        if self.initial_majority >= n_states {
            return bad(format!(
                "majority index {} out of range",
                self.initial_majority
            ));
        }
        let settle = (1.0 / self.drift_rate).ceil() as usize;
        let mut prev: Option<Flip> = None;
        for f in &self.flips {
            if f.majority >= n_states {
                return bad(format!("majority index {} out of range", f.majority));
            }
            if f.step > self.horizon {
                return bad(format!(
                    "flip at {} beyond horizon {}",
                    f.step, self.horizon
                ));
            }
            let prev_major = prev.map_or(self.initial_majority, |p| p.majority);
            if f.majority == prev_major {
                return bad(format!("flip at {} keeps majority {}", f.step, f.majority));
            }
            if let Some(p) = prev {
                if f.step < p.step + settle {
                    return bad(format!(
                        "flip at {} starts before the previous one settles",
                        f.step
                    ));
                }
            }
            prev = Some(*f);
        }
        Ok(())
    }
}

fn regime(n: usize, majority: usize, share: f64) -> Vec<f64> {
    let other = (1.0 - share) / (n - 1) as f64;
    (0..n)
        .map(|i| if i == majority { share } else { other })
        .collect()
}

/// Noise-free mean field at step `t`.
fn base_mean_field(spec: &RegimeSpec, n: usize, t: usize) -> Vec<f64> {
    let mut from = regime(n, spec.initial_majority, spec.majority_share);
    let mut to = from.clone();
    let mut alpha = 0.0;
    for f in spec.flips.iter().take_while(|f| f.step <= t) {
        from = to;
        to = regime(n, f.majority, spec.majority_share);
        alpha = if f.step == 0 {
            1.0
        } else {
            ((t - f.step + 1) as f64 * spec.drift_rate).min(1.0)
        };
    }
    from.iter()
        .zip(&to)
        .map(|(a, b)| (1.0 - alpha) * a + alpha * b)
        .collect()
}

const TRAITS: [&str; 8] = [
    "college student",
    "retired teacher",
    "night-shift nurse",
    "software engineer",
    "small shop owner",
    "local journalist",
    "high school parent",
    "delivery driver",
];
const HABITS: [&str; 4] = [
    "reads the news daily",
    "follows local groups",
    "rarely posts",
    "debates in comments",
];

fn persona_profile(share_propensity: f64, rng: &mut impl rand::Rng) -> String {
    let trait_ = TRAITS[rng.random_range(0..TRAITS.len())];
    let habit = HABITS[rng.random_range(0..HABITS.len())];
    let style = if share_propensity >= 0.5 {
        "frequently reposts"
    } else {
        "mostly writes comments"
    };
    format!("{trait_}, {habit}, {style}")
}

fn action_text(state: &str, share: bool, topic: &str, rng: &mut impl rand::Rng) -> String {
    let lines: &[&str] = match state {
        "positive" => &[
            "Great news, I support this",
            "Glad this is confirmed",
            "I think this is true and good",
        ],
        "negative" => &[
            "This is fake, do not believe it",
            "Bad and wrong, I oppose this",
            "Looks like a lie",
        ],
        _ => &[
            "Waiting for official information",
            "Not sure yet about this",
            "Any source on this",
        ],
    };
    let line = lines[rng.random_range(0..lines.len())];
    if share {
        format!("Repost: {line} ({topic})")
    } else {
        format!("{line}.")
    }
}

/// Build a multi-regime event over the positive/neutral/negative state space
/// and the six share/comment actions. Steps run from `t = 0` to
/// `horizon - 1`; a signal naming the new majority is emitted at each flip.
pub fn synthesize_regime_event(spec: &RegimeSpec) -> Result<EventTimeline> {
    let states = StateSpace::polarity();
    let actions = ActionSpace::social();
    let n = states.len();
    spec.validate(n)?;

    let mut persona_rng = substream(spec.seed, "synth.personas");
    let mut pool_rng = substream(spec.seed, "synth.pool");
    let mut noise_rng = substream(spec.seed, "synth.noise");
    let mut action_rng = substream(spec.seed, "synth.actions");

    let width = spec.pool_size.to_string().len();
    let mut personas = Vec::with_capacity(spec.pool_size);
    let mut share_propensity = Vec::with_capacity(spec.pool_size);
    for i in 0..spec.pool_size {
        let p: f64 = persona_rng.random_range(0.1..0.9);
        personas.push(AgentPersona {
            agent_id: format!("agent_{i:0width$}"),
            profile: persona_profile(p, &mut persona_rng),
        });
        share_propensity.push(p);
    }

    let normal = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite scale");
    let mut steps = Vec::with_capacity(spec.horizon);
    for t in 0..spec.horizon {
        let mut m = base_mean_field(spec, n, t);
        if spec.noise > 0.0 {
            for v in m.iter_mut() {
                let e = loop {
                    let e: f64 = normal.sample(&mut noise_rng);
                    if e.abs() <= 2.0 * spec.noise {
                        break e;
                    }
                };
                *v = (*v + e).max(0.0);
            }
        }
        let m = MeanField::from_weights(&m)?;

        let mut idx = sample(&mut pool_rng, spec.pool_size, spec.agents_per_step).into_vec();
        idx.sort_unstable();
        let active: Vec<String> = idx.iter().map(|&i| personas[i].agent_id.clone()).collect();
        let mut recs = Vec::with_capacity(idx.len());
        for &i in &idx {
            let u: f64 = action_rng.random();
            let mut state = n - 1;
            let mut acc = 0.0;
            for (s, p) in m.probs().iter().enumerate() {
                acc += p;
                if u < acc {
                    state = s;
                    break;
                }
            }
            let share = action_rng.random::<f64>() < share_propensity[i];
            let label = format!(
                "{}_{}",
                if share { "share" } else { "comment" },
                states.label(state)
            );
            let action_index = actions.index_of(&label).expect("social action");
            let (text, labels) = if spec.annotate {
                let text = action_text(states.label(state), share, &spec.topic, &mut action_rng);
                (Some(text), Some(actions.profile(action_index).clone()))
            } else {
                (None, None)
            };
            recs.push(ActionRecord {
                agent_id: personas[i].agent_id.clone(),
                timestep: t,
                action_index,
                text,
                labels,
            });
        }
        let signal = spec
            .flips
            .iter()
            .find(|f| f.step == t)
            .map(|f| ExogenousSignal {
                source_id: "official_source".into(),
                text: format!(
                    "Breaking update on the {}: new evidence now points to a {} outcome.",
                    spec.topic,
                    states.label(f.majority)
                ),
                timestep: t,
            });
        steps.push(EventStep {
            t,
            active,
            actions: recs,
            signal,
            empirical_mean_field: Some(m),
        });
    }
    Ok(EventTimeline {
        event_id: spec.event_id.clone(),
        topic: spec.topic.clone(),
        personas,
        steps,
        states,
        actions,
    })
}

/// Single-reversal event. `flip_step = 0` yields the post-flip regime
/// throughout; `flip_step = horizon` yields no flip.
pub fn synthesize_reversal_event(spec: &ReversalSpec) -> Result<EventTimeline> {
    if spec.flip_step > spec.horizon {
        return Err(Error::Spec(format!(
            "flip_step {} beyond horizon {}",
            spec.flip_step, spec.horizon
        )));
    }
    if spec.pre_majority == spec.post_majority {
        return Err(Error::Spec("pre and post majority must differ".into()));
    }
    synthesize_regime_event(&spec.to_regimes())
}

/// Mean-field world evolving by a fixed row-stochastic matrix:
/// `m*_0 = initial`, `m*_t = m*_{t−1}·P`. No agents, actions or signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovSpec {
    pub transition: Vec<Vec<f64>>,
    pub initial: MeanField,
    pub horizon: usize,
    pub event_id: String,
}

/// `m·P` for a row-stochastic `P`.
pub fn markov_step(m: &[f64], p: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; m.len()];
    for (mi, row) in m.iter().zip(p) {
        out.iter_mut().zip(row).for_each(|(o, pij)| *o += mi * pij);
    }
    out
}

pub fn synthesize_markov_event(spec: &MarkovSpec) -> Result<EventTimeline> {
    let n = spec.initial.len();
    if spec.transition.len() != n || spec.transition.iter().any(|r| r.len() != n) {
        return Err(Error::Spec(format!("transition matrix must be {n}x{n}")));
    }
    for row in &spec.transition {
        MeanField::new(row.clone())
            .map_err(|e| Error::Spec(format!("transition row not stochastic: {e}")))?;
    }
    let states = if n == 3 {
        StateSpace::polarity()
    } else {
        StateSpace::new((0..n).map(|i| format!("s{i}")))?
    };
    let mut m = spec.initial.probs().to_vec();
    let mut steps = Vec::with_capacity(spec.horizon);
    for t in 0..spec.horizon {
        if t > 0 {
            m = markov_step(&m, &spec.transition);
        }
        let total: f64 = m.iter().sum();
        m.iter_mut().for_each(|v| *v /= total);
        steps.push(EventStep {
            t,
            active: Vec::new(),
            actions: Vec::new(),
            signal: None,
            empirical_mean_field: Some(MeanField::new(m.clone())?),
        });
    }
    Ok(EventTimeline {
        event_id: spec.event_id.clone(),
        topic: "markov world".into(),
        personas: Vec::new(),
        steps,
        states,
        actions: ActionSpace::social(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::majority_state;
    use crate::ingest::validate::validate_event;

    fn majorities(ev: &EventTimeline) -> Vec<usize> {
        ev.mean_fields()
            .unwrap()
            .into_iter()
            .map(majority_state)
            .collect()
    }

    #[test]
    fn markov_world_follows_the_matrix() {
        let p = vec![
            vec![0.8, 0.1, 0.1],
            vec![0.2, 0.7, 0.1],
            vec![0.1, 0.2, 0.7],
        ];
        let initial = MeanField::new(vec![1.0, 0.0, 0.0]).unwrap();
        let ev = synthesize_markov_event(&MarkovSpec {
            transition: p,
            initial,
            horizon: 3,
            event_id: "mk".into(),
        })
        .unwrap();
        let ms = ev.mean_fields().unwrap();
        assert_eq!(ms[1].probs(), &[0.8, 0.1, 0.1]);
        let expect = [
            0.8 * 0.8 + 0.1 * 0.2 + 0.1 * 0.1,
            0.8 * 0.1 + 0.1 * 0.7 + 0.1 * 0.2,
            0.8 * 0.1 + 0.1 * 0.1 + 0.1 * 0.7,
        ];
        for (a, b) in ms[2].probs().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(validate_event(&ev).is_empty());
    }

    #[test]
    fn reversal_majority_schedule() {
        let ev = synthesize_reversal_event(&ReversalSpec::new(100, 50, 0, 2, 1)).unwrap();
        let maj = majorities(&ev);
        assert!(maj[..50].iter().all(|&m| m == 0));
        assert!(maj[60..].iter().all(|&m| m == 2));
        assert!(ev.steps[50]
            .signal
            .as_ref()
            .unwrap()
            .text
            .contains("negative"));
        assert_eq!(ev.steps.iter().filter(|s| s.signal.is_some()).count(), 1);
        assert!(validate_event(&ev).is_empty());
    }

    #[test]
    fn degenerate_flip_steps() {
        let ev = synthesize_reversal_event(&ReversalSpec::new(30, 0, 0, 2, 2)).unwrap();
        assert!(majorities(&ev).iter().all(|&m| m == 2));
        let ev = synthesize_reversal_event(&ReversalSpec::new(30, 30, 0, 2, 2)).unwrap();
        assert!(majorities(&ev).iter().all(|&m| m == 0));
        assert!(ev.steps.iter().all(|s| s.signal.is_none()));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = ReversalSpec::new(10, 5, 0, 0, 0);
        assert!(matches!(synthesize_reversal_event(&s), Err(Error::Spec(_))));
        s.post_majority = 1;
        s.drift_rate = 0.0;
        assert!(matches!(synthesize_reversal_event(&s), Err(Error::Spec(_))));
        s.drift_rate = 1.5;
        assert!(synthesize_reversal_event(&s).is_err());
        s.drift_rate = 0.5;
        s.flip_step = 11;
        assert!(synthesize_reversal_event(&s).is_err());
        s.flip_step = 5;
        s.agents_per_step = 100;
        assert!(matches!(synthesize_reversal_event(&s), Err(Error::Spec(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let s = ReversalSpec::new(40, 20, 1, 0, 9);
        assert_eq!(
            synthesize_reversal_event(&s).unwrap(),
            synthesize_reversal_event(&s).unwrap()
        );
        let mut t = s.clone();
        t.seed = 10;
        assert_ne!(
            synthesize_reversal_event(&s).unwrap().steps,
            synthesize_reversal_event(&t).unwrap().steps
        );
    }

    #[test]
    fn multi_flip_regimes() {
        let spec = RegimeSpec {
            horizon: 300,
            initial_majority: 0,
            flips: vec![
                Flip {
                    step: 100,
                    majority: 1,
                },
                Flip {
                    step: 200,
                    majority: 2,
                },
            ],
            drift_rate: 0.05,
            agents_per_step: 10,
            pool_size: 20,
            noise: 0.02,
            majority_share: 0.7,
            seed: 4,
            event_id: "long".into(),
            topic: default_topic(),
            annotate: false,
        };
        let ev = synthesize_regime_event(&spec).unwrap();
        let maj = majorities(&ev);
        assert!(maj[..100].iter().all(|&m| m == 0));
        assert!(maj[120..200].iter().all(|&m| m == 1));
        assert!(maj[220..].iter().all(|&m| m == 2));
        assert!(ev.steps[5].actions[0].labels.is_none());
        let mut close = spec.clone();
        close.flips[1].step = 110;
        assert!(synthesize_regime_event(&close).is_err());
    }
}
