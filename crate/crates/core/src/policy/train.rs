//! Training objective of the tabular policy: the weighted long-horizon
//! prediction loss through the frozen transition model plus text
//! supervision on the ground-truth actions.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::backend::PolicyBackend;
use super::features::{PolicyFeatures, StepFeatures};
use super::mask::{sample_mask, DropoutMask};
use super::select::candidate_weights;
use super::tabular::{sample_categorical, TabularPolicy};
use crate::domain::{AgentPersona, EventTimeline, MeanField, Synopsis};
use crate::error::{Error, Result};
use crate::metrics::KL_SMOOTHING;
use crate::metrics::{kl_divergence, ActionLikelihood};
use crate::optim::{
    check_gradients, clip_global_norm, AdamW, AdamWConfig, GradCheckOptions, GradCheckReport,
    Tensor,
};
use crate::rng::{self, Rng};
use crate::summarizer::{TemplateSummarizer, DEFAULT_TOKEN_BUDGET};
use crate::tape::{Mat, Tape, Var};
use crate::transition::model::Bound;
use crate::transition::{action_state_histogram, prepare_event, PreparedEvent, TransitionModel};

const NLL_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyLosses {
    pub pred: f64,
    pub text: f64,
    pub total: f64,
}

/// Step-level features and mean field seen by agents at each step of a
/// recorded event, replayed through the template summarizer.
pub(crate) struct StepView {
    pub features: StepFeatures,
    pub mean_field: MeanField,
}

pub(crate) fn replay_views(event: &EventTimeline, layout: &PolicyFeatures) -> Vec<StepView> {
    let summarizer = TemplateSummarizer::new(
        event.topic.clone(),
        event.states.clone(),
        event.actions.clone(),
    );
    let mut r_prev = Synopsis::empty(DEFAULT_TOKEN_BUDGET);
    let mut m_prev = event.initial_mean_field();
    let mut out = Vec::with_capacity(event.horizon());
    for step in &event.steps {
        let hist = action_state_histogram(&step.actions, &event.actions, &event.states);
        let m = step
            .empirical_mean_field
            .clone()
            .or_else(|| hist.clone())
            .unwrap_or_else(|| m_prev.clone());
        // Without a mean field the summary can only reflect the actions.
        let shown = if layout.state_aware {
            m.clone()
        } else {
            hist.unwrap_or_else(|| m.clone())
        };
        out.push(StepView {
            features: layout.step(&r_prev, &m, step.signal.as_ref()),
            mean_field: m.clone(),
        });
        r_prev = summarizer.summarize(&r_prev, &shown, &step.actions, step.signal.as_ref());
        m_prev = m;
    }
    out
}

fn persona_block(layout: &PolicyFeatures, event: &EventTimeline, agent: &str) -> Vec<f64> {
    match event.persona(agent) {
        Some(p) => layout.persona_block(p),
        None => layout.persona_block(&AgentPersona {
            agent_id: agent.into(),
            profile: String::new(),
        }),
    }
}

struct PolicyStep {
    /// One feature row per acting agent.
    rows: Vec<Vec<f64>>,
    actions: Vec<usize>,
}

/// An event encoded for policy training against a transition model.
pub struct PolicyEvent {
    pub event_id: String,
    transition: PreparedEvent,
    targets: Vec<MeanField>,
    steps: Vec<PolicyStep>,
    /// `n_actions × n_states`: state histogram contribution of each action.
    action_states: Arc<Mat>,
}

impl PolicyEvent {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Encode `event` for training `policy` against `model`. Each acting agent's
/// state is read from its ground-truth action (State label or profile), or
/// drawn from `m*` when the action maps to no state.
pub fn prepare_policy_event(
    policy: &TabularPolicy,
    model: &TransitionModel,
    event: &EventTimeline,
) -> Result<PolicyEvent> {
    let targets: Vec<MeanField> = event.mean_fields()?.into_iter().cloned().collect();
    if event.actions.len() != policy.n_actions {
        return Err(Error::Shape(format!(
            "event has {} actions, policy {}",
            event.actions.len(),
            policy.n_actions
        )));
    }
    if event.states.len() != policy.features.n_states {
        return Err(Error::Shape(format!(
            "event has {} states, policy {}",
            event.states.len(),
            policy.features.n_states
        )));
    }
    let transition = prepare_event(model, event)?;
    let layout = policy.features;
    let views = replay_views(event, &layout);
    let mut state_rng = rng::substream(
        policy.config.seed,
        &format!("policy-states/{}", event.event_id),
    );
    let mut steps = Vec::with_capacity(event.horizon());
    for ((step, view), m) in event.steps.iter().zip(&views).zip(&targets) {
        let mut rows = Vec::with_capacity(step.actions.len());
        let mut actions = Vec::with_capacity(step.actions.len());
        for a in &step.actions {
            if a.action_index >= policy.n_actions {
                return Err(Error::Shape(format!(
                    "action index {} out of range",
                    a.action_index
                )));
            }
            let state =
                action_state_histogram(std::slice::from_ref(a), &event.actions, &event.states)
                    .map(|h| h.probs().iter().position(|p| *p > 0.5).unwrap_or(0))
                    .unwrap_or_else(|| sample_categorical(m.probs(), &mut state_rng));
            let mut row = vec![0.0; layout.width()];
            view.features
                .agent_into(state, &persona_block(&layout, event, &a.agent_id), &mut row);
            rows.push(row);
            actions.push(a.action_index);
        }
        steps.push(PolicyStep { rows, actions });
    }
    let s = event.states.len();
    let mut action_states = Mat::zeros(policy.n_actions, s);
    for a in 0..policy.n_actions {
        match event.actions.state_of(a, &event.states) {
            Some(i) => action_states.row_mut(a)[i] = 1.0,
            None => action_states.row_mut(a).fill(1.0 / s as f64),
        }
    }
    Ok(PolicyEvent {
        event_id: event.event_id.clone(),
        transition,
        targets,
        steps,
        action_states: Arc::new(action_states),
    })
}

/// Sampled timesteps and candidate masks of one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossPlan {
    /// Ascending steps with at least one action.
    pub steps: Vec<usize>,
    /// `masks[i][j]`: mask of candidate `j` at `steps[i]`.
    pub masks: Vec<Vec<DropoutMask>>,
}

pub fn plan_event(ev: &PolicyEvent, policy: &TabularPolicy, rng: &mut Rng) -> Result<LossPlan> {
    let cfg = &policy.config;
    let eligible: Vec<usize> = (0..ev.steps.len())
        .filter(|&k| !ev.steps[k].actions.is_empty())
        .collect();
    let mut steps = if cfg.steps_per_event == 0 || cfg.steps_per_event >= eligible.len() {
        eligible
    } else {
        let mut pick: Vec<usize> = index::sample(rng, eligible.len(), cfg.steps_per_event)
            .into_iter()
            .map(|i| eligible[i])
            .collect();
        pick.sort_unstable();
        pick
    };
    steps.dedup();
    let masks = steps
        .iter()
        .map(|_| {
            (0..cfg.candidates)
                .map(|_| sample_mask(policy.width(), cfg.dropout, rng))
                .collect()
        })
        .collect::<Result<Vec<Vec<_>>>>()?;
    Ok(LossPlan { steps, masks })
}

struct Graph {
    pred: Var,
    text: Var,
    total: Var,
    weights_var: Var,
    /// Candidate weights per planned step with a future.
    cand_weights: Vec<Vec<f64>>,
}

/// Builds the loss of one event. `fixed` replaces the candidate weights
/// (used to hold them constant under finite differences).
fn loss_graph(
    policy: &TabularPolicy,
    model: &TransitionModel,
    ev: &PolicyEvent,
    plan: &LossPlan,
    fixed: Option<&[Vec<f64>]>,
    tape: &mut Tape,
) -> Graph {
    let cfg = &policy.config;
    let j = cfg.candidates;
    let last = ev.steps.len() - 1;
    let width = policy.width();

    let mut x = Vec::new();
    let mut targets = Vec::new();
    let mut sizes = Vec::new();
    for (i, &k) in plan.steps.iter().enumerate() {
        let st = &ev.steps[k];
        for mask in &plan.masks[i] {
            for row in &st.rows {
                let start = x.len();
                x.extend_from_slice(row);
                mask.apply(&mut x[start..]);
            }
            targets.extend_from_slice(&st.actions);
            sizes.push(st.rows.len());
        }
    }
    let rows = targets.len();
    let w = tape.leaf(
        Mat::from_vec(width, policy.n_actions, policy.weights.data.clone()),
        true,
    );
    let xv = tape.constant(Mat::from_vec(rows, width, x));
    let logits = tape.matmul(xv, w);
    let probs = tape.softmax_rows(logits);
    let text = tape.nll_rows(probs, targets, vec![1.0 / rows as f64; rows], NLL_FLOOR);

    let with_future: Vec<usize> = plan.steps.iter().copied().filter(|&k| k < last).collect();
    let mut cand_weights = Vec::new();
    let pred = if with_future.is_empty() || cfg.lookahead == 0 {
        tape.constant(Mat::zeros(1, 1))
    } else {
        let nb = with_future.len() * j;
        let hist = tape.group_mean(probs, sizes);
        let map = tape.constant((*ev.action_states).clone());
        let hist = tape.matmul(hist, map);
        let first = tape.slice_rows(hist, 0, nb);
        let starts: Vec<usize> = with_future
            .iter()
            .flat_map(|&k| std::iter::repeat_n(k, j))
            .collect();
        let steps = cfg.lookahead.min(last - with_future[0]);
        let bound = Bound::new(model, tape, false);
        let main = bound.sequence(tape, &ev.transition.inputs, &mut None);
        let preds = bound.branches(
            tape,
            &ev.transition.inputs,
            &main,
            &starts,
            steps,
            Some(first),
            &mut None,
        );

        // Costs from the forward values, then weights per step.
        let mut costs = vec![0.0; nb];
        for (s, p) in preds.iter().enumerate() {
            let pv = tape.value(*p);
            let g = cfg.discount.powi(s as i32);
            for (b, &tb) in starts.iter().enumerate() {
                if tb + s < last {
                    let q = MeanField::new(pv.row(b).to_vec()).expect("softmax rows");
                    costs[b] += g * kl_divergence(&ev.targets[tb + s + 1], &q).expect("same width");
                }
            }
        }
        for (i, chunk) in costs.chunks(j).enumerate() {
            cand_weights.push(match fixed {
                Some(f) => f[i].clone(),
                None => candidate_weights(chunk, cfg.temperature),
            });
        }
        let n = with_future.len() as f64;
        let mut terms = Vec::with_capacity(preds.len());
        for (s, p) in preds.into_iter().enumerate() {
            let g = cfg.discount.powi(s as i32);
            let mut tgt = Mat::zeros(nb, ev.action_states.cols);
            let mut wts = vec![0.0; nb];
            for (b, &tb) in starts.iter().enumerate() {
                let row = (tb + s + 1).min(last);
                tgt.row_mut(b).copy_from_slice(ev.targets[row].probs());
                if tb + s < last {
                    wts[b] = g * cand_weights[b / j][b % j] / n;
                }
            }
            terms.push((tape.kl_rows(Arc::new(tgt), p, wts, KL_SMOOTHING), 1.0));
        }
        tape.lin_comb(terms)
    };
    let total = tape.lin_comb(vec![(pred, 1.0), (text, cfg.text_weight)]);
    Graph {
        pred,
        text,
        total,
        weights_var: w,
        cand_weights,
    }
}

fn graph_losses(tape: &Tape, g: &Graph) -> PolicyLosses {
    PolicyLosses {
        pred: tape.value(g.pred).scalar(),
        text: tape.value(g.text).scalar(),
        total: tape.value(g.total).scalar(),
    }
}

/// Losses of one event under a fixed plan, with the gradient of `L_total`
/// with respect to the policy weights.
pub fn event_loss_and_grad(
    policy: &TabularPolicy,
    model: &TransitionModel,
    ev: &PolicyEvent,
    plan: &LossPlan,
) -> (PolicyLosses, Vec<f64>) {
    let mut tape = Tape::new();
    let g = loss_graph(policy, model, ev, plan, None, &mut tape);
    let grads = tape.backward(g.total);
    let grad = grads
        .get(g.weights_var)
        .map(|m| m.data.clone())
        .unwrap_or_else(|| vec![0.0; policy.weights.data.len()]);
    (graph_losses(&tape, &g), grad)
}

fn prepare_all(
    policy: &TabularPolicy,
    model: &TransitionModel,
    dataset: &[EventTimeline],
) -> Result<Vec<PolicyEvent>> {
    if dataset.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let evs = dataset
        .iter()
        .map(|e| prepare_policy_event(policy, model, e))
        .collect::<Result<Vec<_>>>()?;
    if evs.iter().any(|e| e.is_empty()) {
        return Err(Error::Horizon("event without steps".into()));
    }
    Ok(evs)
}

/// `L_pred`, `L_text` and `L_total = L_pred + α·L_text` over `dataset`,
/// averaged over events, with masks and steps drawn from the policy seed.
pub fn policy_loss(
    policy: &PolicyBackend,
    dataset: &[EventTimeline],
    model: &TransitionModel,
) -> Result<PolicyLosses> {
    let policy = policy.tabular()?;
    policy.config.validate()?;
    let evs = prepare_all(policy, model, dataset)?;
    let mut r = rng::substream(policy.config.seed, "policy-eval");
    let mut sum = PolicyLosses {
        pred: 0.0,
        text: 0.0,
        total: 0.0,
    };
    for ev in &evs {
        let plan = plan_event(ev, policy, &mut r)?;
        let mut tape = Tape::new();
        let g = loss_graph(policy, model, ev, &plan, None, &mut tape);
        let l = graph_losses(&tape, &g);
        sum.pred += l.pred;
        sum.text += l.text;
        sum.total += l.total;
    }
    let n = evs.len() as f64;
    Ok(PolicyLosses {
        pred: sum.pred / n,
        text: sum.text / n,
        total: sum.total / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyEpoch {
    pub epoch: usize,
    pub pred: f64,
    pub text: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyCurve {
    pub epochs: Vec<PolicyEpoch>,
}

impl PolicyCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,L_pred,L_text,L_total\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.pred, e.text, e.total);
        }
        out
    }
}

/// AdamW on `L_total`, one update per event and epoch, against a frozen
/// transition model.
pub fn train_policy(
    policy: &mut PolicyBackend,
    dataset: &[EventTimeline],
    model: &TransitionModel,
) -> Result<PolicyCurve> {
    let PolicyBackend::Tabular(policy) = policy else {
        return Err(Error::Backend(
            "only the tabular policy is trainable".into(),
        ));
    };
    train_tabular(policy, dataset, model)
}

pub fn train_tabular(
    policy: &mut TabularPolicy,
    dataset: &[EventTimeline],
    model: &TransitionModel,
) -> Result<PolicyCurve> {
    let cfg = policy.config.clone();
    cfg.validate()?;
    let evs = prepare_all(policy, model, dataset)?;
    let adam_cfg = AdamWConfig {
        lr: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut adam = AdamW::new(adam_cfg, &[policy.weights.data.len()]);
    let mut order_rng = rng::substream(cfg.seed, "policy-order");
    let mut mask_rng = rng::substream(cfg.seed, "policy-masks");
    let mut order: Vec<usize> = (0..evs.len()).collect();
    let mut curve = PolicyCurve::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut sum = PolicyLosses {
            pred: 0.0,
            text: 0.0,
            total: 0.0,
        };
        for &i in &order {
            let plan = plan_event(&evs[i], policy, &mut mask_rng)?;
            let (l, g) = event_loss_and_grad(policy, model, &evs[i], &plan);
            if !l.total.is_finite() {
                return Err(Error::Backend(format!(
                    "non-finite policy loss on `{}`",
                    evs[i].event_id
                )));
            }
            sum.pred += l.pred;
            sum.text += l.text;
            sum.total += l.total;
            let mut grads = vec![g];
            clip_global_norm(&mut grads, cfg.clip_norm);
            adam.step(std::slice::from_mut(&mut policy.weights), &grads);
        }
        let n = evs.len() as f64;
        curve.epochs.push(PolicyEpoch {
            epoch,
            pred: sum.pred / n,
            text: sum.text / n,
            total: sum.total / n,
        });
    }
    Ok(curve)
}

/// Central differences of `L_total` on one event with the masks, steps and
/// candidate weights held fixed.
pub fn policy_gradient_check(
    policy: &TabularPolicy,
    model: &TransitionModel,
    event: &EventTimeline,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let ev = prepare_policy_event(policy, model, event)?;
    let mut r = rng::substream(opts.seed, "policy-gradcheck");
    let plan = plan_event(&ev, policy, &mut r)?;
    let mut tape = Tape::new();
    let g = loss_graph(policy, model, &ev, &plan, None, &mut tape);
    let weights = g.cand_weights.clone();
    let grads = tape.backward(g.total);
    let analytic = grads
        .get(g.weights_var)
        .map(|m| m.data.clone())
        .unwrap_or_else(|| vec![0.0; policy.weights.data.len()]);
    let mut probe = policy.clone();
    Ok(check_gradients(
        std::slice::from_ref(&policy.weights),
        &[analytic],
        opts,
        |params: &[Tensor]| {
            probe.weights.data.clone_from(&params[0].data);
            let mut tape = Tape::new();
            let g = loss_graph(&probe, model, &ev, &plan, Some(&weights), &mut tape);
            tape.value(g.total).scalar()
        },
    ))
}

/// Exact action likelihoods under the full (unmasked) policy. For
/// state-aware policies the agent state is unobserved and marginalized over
/// the step's mean field.
pub struct PolicyLikelihood<'a> {
    pub policy: &'a TabularPolicy,
}

impl ActionLikelihood for PolicyLikelihood<'_> {
    fn action_probs(&self, event: &EventTimeline) -> Result<Vec<f64>> {
        let p = self.policy;
        let layout = p.features;
        let mask = DropoutMask::full(p.width());
        let mut out = Vec::new();
        let mut row = vec![0.0; p.width()];
        let mut probs = vec![0.0; p.n_actions];
        for (step, view) in event.steps.iter().zip(replay_views(event, &layout)) {
            for a in &step.actions {
                if a.action_index >= p.n_actions {
                    return Err(Error::Shape(format!(
                        "action index {} out of range",
                        a.action_index
                    )));
                }
                let persona = persona_block(&layout, event, &a.agent_id);
                let prob = if layout.state_aware {
                    let mut acc = 0.0;
                    for (s, ms) in view.mean_field.probs().iter().enumerate() {
                        if *ms > 0.0 {
                            view.features.agent_into(s, &persona, &mut row);
                            p.probs_into(&row, &mask, &mut probs);
                            acc += ms * probs[a.action_index];
                        }
                    }
                    acc
                } else {
                    view.features.agent_into(0, &persona, &mut row);
                    p.probs_into(&row, &mask, &mut probs);
                    probs[a.action_index]
                };
                out.push(prob);
            }
        }
        Ok(out)
    }
}
