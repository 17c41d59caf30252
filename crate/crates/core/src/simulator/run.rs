use std::collections::{BTreeMap, HashMap};

use rand::seq::index;

use super::config::{PoolPolicy, SimConfig, SimMode};
use crate::domain::{
    majority_state, ActionRecord, AgentPersona, AgentState, EventTimeline, ExogenousSignal,
    MeanField, MicroState, Synopsis, Trajectory, TrajectoryRecord,
};
use crate::error::{Error, Result};
use crate::policy::{
    candidate_costs, reselect_actions, sample_action, sample_categorical, sample_mask,
    CandidateSet, DropoutMask, PolicyBackend, StepFeatures,
};
use crate::rng::{substream, Rng};
use crate::summarizer::Summarizer;
use crate::transition::{
    action_state_histogram, ContextEncoder, MeanFieldModel, ModelState, TransitionContext,
};

/// The pluggable parts of a run.
#[derive(Clone, Copy)]
pub struct Backends<'a> {
    pub policy: &'a PolicyBackend,
    pub summarizer: &'a Summarizer,
    /// Required in stateful mode; unused otherwise.
    pub transition: Option<&'a dyn MeanFieldModel>,
}

fn draw_pool(available: usize, n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if available == 0 || n > available {
        return Err(Error::Pool {
            requested: n,
            available,
        });
    }
    let mut idx = index::sample(rng, available, n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Active agent ids for event step `step`.
pub fn refresh_pool(
    event: &EventTimeline,
    step: usize,
    pool: PoolPolicy,
    rng: &mut Rng,
) -> Result<Vec<String>> {
    match pool {
        PoolPolicy::Replay => event
            .steps
            .get(step)
            .map(|s| s.active.clone())
            .ok_or_else(|| {
                Error::Horizon(format!(
                    "step {step} beyond the event's {} steps",
                    event.horizon()
                ))
            }),
        PoolPolicy::Sample { n } => Ok(draw_pool(event.personas.len(), n, rng)?
            .into_iter()
            .map(|i| event.personas[i].agent_id.clone())
            .collect()),
    }
}

/// Start of the first run of `sustain` consecutive entries whose majority
/// differs from the majority at `from`.
pub fn detect_flip(series: &[MeanField], from: usize, sustain: usize) -> Option<usize> {
    let base = majority_state(series.get(from)?);
    let mut run = 0;
    for (t, m) in series.iter().enumerate().skip(from + 1) {
        if majority_state(m) != base {
            run += 1;
            if run >= sustain.max(1) {
                return Some(t + 1 - run);
            }
        } else {
            run = 0;
        }
    }
    None
}

/// Every persona the run can refer to, with their cached encodings.
struct Roster {
    personas: Vec<AgentPersona>,
    /// False for ids that appear in the event's active sets without a
    /// persona entry; they contribute nothing to pooled persona features.
    known: Vec<bool>,
    policy_blocks: Vec<Vec<f64>>,
    context_blocks: Vec<Vec<f64>>,
}

impl Roster {
    fn new(
        event: &EventTimeline,
        policy: &PolicyBackend,
        encoder: Option<&ContextEncoder>,
    ) -> (Self, HashMap<String, usize>) {
        let mut personas = event.personas.clone();
        let mut known = vec![true; personas.len()];
        let mut ids: HashMap<String, usize> = HashMap::new();
        for (i, p) in personas.iter().enumerate() {
            ids.entry(p.agent_id.clone()).or_insert(i);
        }
        for step in &event.steps {
            for id in &step.active {
                if !ids.contains_key(id) {
                    ids.insert(id.clone(), personas.len());
                    personas.push(AgentPersona {
                        agent_id: id.clone(),
                        profile: String::new(),
                    });
                    known.push(false);
                }
            }
        }
        let policy_blocks = match policy {
            PolicyBackend::Tabular(p) => personas
                .iter()
                .map(|x| p.features.persona_block(x))
                .collect(),
            PolicyBackend::External(_) => Vec::new(),
        };
        let context_blocks = match encoder {
            Some(e) => personas.iter().map(|x| e.encode_persona(x)).collect(),
            None => Vec::new(),
        };
        (
            Roster {
                personas,
                known,
                policy_blocks,
                context_blocks,
            },
            ids,
        )
    }
}

/// What every agent of a step sees, apart from its own state and persona.
struct StepView<'s> {
    synopsis: &'s Synopsis,
    mean_field: &'s MeanField,
    signal: Option<&'s ExogenousSignal>,
    features: Option<StepFeatures>,
}

struct Runner<'a> {
    event: &'a EventTimeline,
    backends: Backends<'a>,
    roster: Roster,
    /// Roster indices of the agents acting at each event step.
    active: Vec<Vec<usize>>,
    encoder: Option<ContextEncoder>,
    /// Persona and signal blocks of upcoming steps.
    exo: BTreeMap<usize, Vec<f64>>,
}

impl<'a> Runner<'a> {
    fn exo(&mut self, k: usize) -> &[f64] {
        if !self.exo.contains_key(&k) {
            let enc = self.encoder.expect("stateful runs carry an encoder");
            let l = enc.layout;
            let h = l.hash_dims;
            let mut block = vec![0.0; 2 * h];
            let mut n = 0usize;
            for &i in &self.active[k] {
                if self.roster.known[i] {
                    block[..h]
                        .iter_mut()
                        .zip(&self.roster.context_blocks[i])
                        .for_each(|(a, b)| *a += b);
                    n += 1;
                }
            }
            if n > 0 {
                block[..h].iter_mut().for_each(|a| *a /= n as f64);
            }
            enc.encode_signal_into(self.event.steps[k].signal.as_ref(), &mut block[h..]);
            self.exo.insert(k, block);
        }
        &self.exo[&k]
    }

    fn context(
        &mut self,
        k: usize,
        synopsis: &Synopsis,
        m: &[f64],
        a: &[f64],
    ) -> TransitionContext {
        let enc = self.encoder.expect("stateful runs carry an encoder");
        let l = enc.layout;
        let mut f = Vec::with_capacity(l.width());
        f.resize(l.hash_dims, 0.0);
        enc.encode_synopsis_into(synopsis.text(), &mut f[..l.hash_dims]);
        f.extend_from_slice(m);
        f.extend_from_slice(a);
        f.extend_from_slice(self.exo(k));
        TransitionContext {
            layout: l,
            features: f,
        }
    }

    /// Context at a future position whose synopsis, mean-field and action
    /// blocks the rollout overwrites.
    fn future_context(&mut self, k: usize) -> TransitionContext {
        let l = self.encoder.expect("stateful runs carry an encoder").layout;
        let mut f = vec![0.0; l.hash_dims + 2 * l.n_states];
        f.extend_from_slice(self.exo(k));
        TransitionContext {
            layout: l,
            features: f,
        }
    }

    fn view<'s>(
        &self,
        synopsis: &'s Synopsis,
        mean_field: &'s MeanField,
        signal: Option<&'s ExogenousSignal>,
    ) -> StepView<'s> {
        let features = match self.backends.policy {
            PolicyBackend::Tabular(p) => Some(p.features.step(synopsis, mean_field, signal)),
            PolicyBackend::External(_) => None,
        };
        StepView {
            synopsis,
            mean_field,
            signal,
            features,
        }
    }

    fn sample_joint(
        &self,
        view: &StepView<'_>,
        agents: &[usize],
        states: &[usize],
        mask: &DropoutMask,
        rng: &mut Rng,
    ) -> Result<Vec<usize>> {
        match (self.backends.policy, &view.features) {
            (PolicyBackend::Tabular(p), Some(step)) => {
                let mut x = vec![0.0; p.width()];
                let mut probs = vec![0.0; p.n_actions];
                agents
                    .iter()
                    .zip(states)
                    .map(|(&i, &s)| {
                        step.agent_into(s, &self.roster.policy_blocks[i], &mut x);
                        p.probs_into(&x, mask, &mut probs);
                        if probs.iter().any(|v| !v.is_finite()) {
                            return Err(Error::Backend("non-finite policy probabilities".into()));
                        }
                        Ok(sample_categorical(&probs, rng))
                    })
                    .collect()
            }
            (policy, _) => agents
                .iter()
                .zip(states)
                .map(|(&i, &s)| {
                    let z = MicroState {
                        state: AgentState::new(s, &self.event.states)?,
                        synopsis: view.synopsis,
                        mean_field: view.mean_field,
                        signal: view.signal,
                        persona: &self.roster.personas[i],
                    };
                    sample_action(policy, &z, mask, rng)
                })
                .collect(),
        }
    }

    fn records(&self, k: usize, agents: &[usize], actions: &[usize]) -> Vec<ActionRecord> {
        let t = self.event.steps[k].t;
        let space = &self.event.actions;
        agents
            .iter()
            .zip(actions)
            .map(|(&i, &a)| {
                let profile = space.profile(a);
                ActionRecord {
                    agent_id: self.roster.personas[i].agent_id.clone(),
                    timestep: t,
                    action_index: a,
                    text: None,
                    labels: (!profile.is_empty()).then(|| profile.clone()),
                }
            })
            .collect()
    }
}

fn check_backends(event: &EventTimeline, config: &SimConfig, b: &Backends<'_>) -> Result<()> {
    config.validate()?;
    if b.policy.n_actions() != event.actions.len() {
        return Err(Error::Shape(format!(
            "policy has {} actions, event {}",
            b.policy.n_actions(),
            event.actions.len()
        )));
    }
    if let PolicyBackend::Tabular(p) = b.policy {
        if p.features.state_aware && p.features.n_states != event.states.len() {
            return Err(Error::Shape(format!(
                "policy has {} states, event {}",
                p.features.n_states,
                event.states.len()
            )));
        }
    }
    match config.mode {
        SimMode::Stateful => {
            let model = b
                .transition
                .ok_or_else(|| Error::Config("stateful mode needs a transition model".into()))?;
            if model.layout().n_states != event.states.len() {
                return Err(Error::Shape(format!(
                    "transition model has {} states, event {}",
                    model.layout().n_states,
                    event.states.len()
                )));
            }
        }
        SimMode::StateIgnored => {
            if b.policy.state_aware() {
                return Err(Error::Config(
                    "state-ignored mode needs a policy without state features".into(),
                ));
            }
        }
    }
    Ok(())
}

/// Simulate `event` under `config`. Record 0 holds the initial condition;
/// record `t` follows event step `t − 1`.
pub fn run_simulation(
    event: &EventTimeline,
    config: &SimConfig,
    backends: Backends<'_>,
) -> Result<Trajectory> {
    let (horizon, warm) = config.resolve(event.horizon())?;
    check_backends(event, config, &backends)?;
    let stateful = config.mode == SimMode::Stateful;
    let model = if stateful { backends.transition } else { None };
    let encoder = model.map(|m| m.encoder());
    let (roster, ids) = Roster::new(event, backends.policy, encoder.as_ref());

    let mut pool_rng = substream(config.seed, "pool");
    let mut policy_rng = substream(config.seed, "policy");
    let mut mask_rng = substream(config.seed, "masks");
    let mut dynamics_rng = substream(config.seed, "dynamics");
    let mut reselect_rng = substream(config.seed, "reselect");

    let mut active = Vec::with_capacity(event.horizon());
    for (k, step) in event.steps.iter().enumerate() {
        let set = match config.pool {
            PoolPolicy::Sample { n } if k >= warm && k < horizon => {
                draw_pool(event.personas.len(), n, &mut pool_rng)?
            }
            _ => step.active.iter().map(|id| ids[id]).collect(),
        };
        active.push(set);
    }
    let mut run = Runner {
        event,
        backends,
        roster,
        active,
        encoder,
        exo: BTreeMap::new(),
    };

    let summarizer = backends.summarizer;
    let budget = summarizer.token_budget();
    let mut r_prev = Synopsis::empty(budget);
    let mut m_prev = event.initial_mean_field();
    let mut a_prev = m_prev.clone();
    let mut records = Vec::with_capacity(horizon + 1);
    records.push(TrajectoryRecord {
        t: 0,
        mean_field: m_prev.clone(),
        synopsis: String::new(),
        actions: Vec::new(),
    });
    let mut session: Option<Box<dyn ModelState + '_>> = model.map(|m| m.start());
    let width = backends.policy.feature_width();
    let full = DropoutMask::full(width);
    let resel = &config.reselection;

    for k in 0..horizon {
        let step = &event.steps[k];
        let signal = step.signal.as_ref();
        run.exo.retain(|&j, _| j >= k);
        let predicted = match session.as_mut() {
            Some(s) => {
                let ctx = run.context(k, &r_prev, m_prev.probs(), a_prev.probs());
                Some(s.push(&ctx)?)
            }
            None => None,
        };

        let mut chosen_synopsis = None;
        let (actions, m_t) = if k < warm {
            let hist = action_state_histogram(&step.actions, &event.actions, &event.states);
            let m = step
                .empirical_mean_field
                .clone()
                .or(hist)
                .or_else(|| predicted.clone())
                .unwrap_or_else(|| m_prev.clone());
            (step.actions.clone(), m)
        } else if let Some(m_hat) = predicted {
            let agents = run.active[k].clone();
            let states: Vec<usize> = agents
                .iter()
                .map(|_| sample_categorical(m_hat.probs(), &mut dynamics_rng))
                .collect();
            let view = run.view(&r_prev, &m_hat, signal);
            let lookahead = resel.lookahead.min(event.horizon() - 1 - k);
            let truth: Option<Vec<MeanField>> = event.steps[k + 1..k + 1 + lookahead]
                .iter()
                .map(|s| s.empirical_mean_field.clone())
                .collect();
            let actions = match truth {
                Some(truth) if resel.enabled && lookahead > 0 => {
                    let mut entries = Vec::with_capacity(resel.candidates);
                    let mut firsts = Vec::with_capacity(resel.candidates);
                    let mut synopses = Vec::with_capacity(resel.candidates);
                    for _ in 0..resel.candidates {
                        let mask = sample_mask(width, resel.dropout, &mut mask_rng)?;
                        let acts =
                            run.sample_joint(&view, &agents, &states, &mask, &mut policy_rng)?;
                        let recs = run.records(k, &agents, &acts);
                        let hist = action_state_histogram(&recs, &event.actions, &event.states);
                        let syn = summarizer.summarize(&r_prev, &m_hat, &recs, signal)?;
                        let a = hist.as_ref().unwrap_or(&m_hat);
                        firsts.push(run.context(k + 1, &syn, m_hat.probs(), a.probs()));
                        synopses.push(syn);
                        entries.push((mask, acts, 0.0));
                    }
                    let future: Vec<TransitionContext> = (k + 2..k + 1 + lookahead)
                        .map(|j| run.future_context(j))
                        .collect();
                    let state = session.as_deref().expect("stateful runs keep a session");
                    let costs = candidate_costs(
                        state,
                        &m_hat,
                        &firsts,
                        &future,
                        &truth,
                        lookahead,
                        resel.discount,
                    )?;
                    for (e, c) in entries.iter_mut().zip(costs) {
                        e.2 = c;
                    }
                    let set =
                        CandidateSet::new(entries, resel.temperature, resel.discount, lookahead)?;
                    let pick = reselect_actions(&set, resel.mode, &mut reselect_rng);
                    chosen_synopsis = Some(synopses.swap_remove(pick));
                    set.candidates
                        .into_iter()
                        .nth(pick)
                        .expect("picked candidate")
                        .actions
                }
                _ => run.sample_joint(&view, &agents, &states, &full, &mut policy_rng)?,
            };
            (run.records(k, &agents, &actions), m_hat)
        } else {
            let agents = run.active[k].clone();
            let states = vec![0; agents.len()];
            let view = run.view(&r_prev, &m_prev, signal);
            let acts = run.sample_joint(&view, &agents, &states, &full, &mut policy_rng)?;
            let recs = run.records(k, &agents, &acts);
            let m = action_state_histogram(&recs, &event.actions, &event.states)
                .unwrap_or_else(|| m_prev.clone());
            (recs, m)
        };

        let hist = action_state_histogram(&actions, &event.actions, &event.states);
        let r_t = match chosen_synopsis {
            Some(s) => s,
            None => {
                let shown = if stateful {
                    &m_t
                } else {
                    hist.as_ref().unwrap_or(&m_t)
                };
                summarizer.summarize(&r_prev, shown, &actions, signal)?
            }
        };
        a_prev = hist.unwrap_or_else(|| m_t.clone());
        records.push(TrajectoryRecord {
            t: k + 1,
            mean_field: m_t.clone(),
            synopsis: r_t.text().to_string(),
            actions,
        });
        m_prev = m_t;
        r_prev = r_t;
    }
    Ok(Trajectory {
        event_id: event.event_id.clone(),
        records,
    })
}
