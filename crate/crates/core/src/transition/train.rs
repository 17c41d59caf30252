//! Sequence and rollout-consistency losses, training loop and gradient check.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::context::{event_contexts, ContextEncoder};
use super::model::{Bound, Dropout, EventInputs, TransitionModel};
use crate::domain::EventTimeline;
use crate::error::{Error, Result};
use crate::metrics::KL_SMOOTHING;
use crate::optim::{
    check_gradients, clip_global_norm, AdamW, AdamWConfig, GradCheckOptions, GradCheckReport,
    Tensor,
};
use crate::rng;
use crate::summarizer::DEFAULT_TOKEN_BUDGET;
use crate::tape::{Grads, Mat, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionLosses {
    pub seq: f64,
    pub roll: f64,
    pub total: f64,
}

/// An event encoded once for repeated loss evaluation.
#[derive(Debug, Clone)]
pub struct PreparedEvent {
    pub event_id: String,
    pub(crate) inputs: EventInputs,
}

impl PreparedEvent {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.len() == 0
    }
}

/// Encoder matching a model's configuration.
pub fn model_encoder(model: &TransitionModel) -> ContextEncoder {
    ContextEncoder::new(
        model.config.hash_dims,
        model.layout.n_states,
        model.config.hash_seed,
    )
}

/// Encode `event` for `model`; every step must carry `m*`.
pub fn prepare_event(model: &TransitionModel, event: &EventTimeline) -> Result<PreparedEvent> {
    event.mean_fields()?;
    if event.steps.is_empty() {
        return Err(Error::Horizon(format!(
            "event `{}` has no steps",
            event.event_id
        )));
    }
    if event.states.len() != model.layout.n_states {
        return Err(Error::Shape(format!(
            "event has {} states, model {}",
            event.states.len(),
            model.layout.n_states
        )));
    }
    let ctx = event_contexts(event, &model_encoder(model), DEFAULT_TOKEN_BUDGET);
    Ok(PreparedEvent {
        event_id: event.event_id.clone(),
        inputs: EventInputs::new(&ctx),
    })
}

struct LossVars {
    seq: Var,
    roll: Var,
    total: Var,
}

/// Rollout starts `0..=T−1−K`; empty when the event is too short.
fn rollout_starts(t: usize, k: usize) -> Vec<usize> {
    if k == 0 || t <= k {
        Vec::new()
    } else {
        (0..t - k).collect()
    }
}

fn loss_graph(
    bound: &Bound<'_>,
    tape: &mut Tape,
    ev: &PreparedEvent,
    d: &mut Option<Dropout<'_>>,
) -> LossVars {
    let cfg = &bound.model.config;
    let inputs = &ev.inputs;
    let targets = inputs
        .targets
        .clone()
        .expect("prepared events carry targets");
    let t = inputs.len();
    let main = bound.sequence(tape, inputs, d);
    let seq = tape.kl_rows(targets.clone(), main.preds, vec![1.0; t], KL_SMOOTHING);
    let starts = rollout_starts(t, cfg.rollout_k);
    let roll = if starts.is_empty() {
        tape.constant(Mat::zeros(1, 1))
    } else {
        let preds = bound.branches(tape, inputs, &main, &starts, cfg.rollout_k, None, d);
        let mut terms = Vec::with_capacity(preds.len());
        for (k, p) in preds.into_iter().enumerate() {
            let mut tgt = Mat::zeros(starts.len(), targets.cols);
            for (b, &tb) in starts.iter().enumerate() {
                tgt.row_mut(b).copy_from_slice(targets.row(tb + k + 1));
            }
            terms.push((
                tape.kl_rows(Arc::new(tgt), p, vec![1.0; starts.len()], KL_SMOOTHING),
                1.0,
            ));
        }
        tape.lin_comb(terms)
    };
    let total = tape.lin_comb(vec![(seq, 1.0), (roll, cfg.alpha_trans)]);
    LossVars { seq, roll, total }
}

fn values(tape: &Tape, v: &LossVars) -> TransitionLosses {
    TransitionLosses {
        seq: tape.value(v.seq).scalar(),
        roll: tape.value(v.roll).scalar(),
        total: tape.value(v.total).scalar(),
    }
}

/// Losses of a prepared event in evaluation mode.
pub fn prepared_loss(model: &TransitionModel, ev: &PreparedEvent) -> TransitionLosses {
    let mut tape = Tape::new();
    let bound = Bound::new(model, &mut tape, false);
    let v = loss_graph(&bound, &mut tape, ev, &mut None);
    values(&tape, &v)
}

/// `L_seq`, `L_roll` and `L_trans = L_seq + α·L_roll` of one event.
pub fn transition_loss(model: &TransitionModel, event: &EventTimeline) -> Result<TransitionLosses> {
    Ok(prepared_loss(model, &prepare_event(model, event)?))
}

fn collect_grads(model: &TransitionModel, bound: &Bound<'_>, grads: &Grads) -> Vec<Vec<f64>> {
    bound
        .vars
        .iter()
        .zip(&model.params)
        .map(|(v, t)| {
            grads
                .get(*v)
                .map(|g| g.data.clone())
                .unwrap_or_else(|| vec![0.0; t.data.len()])
        })
        .collect()
}

/// Losses and exact parameter gradients of `L_trans`, optionally with
/// training-mode dropout drawn from `rng`.
pub fn loss_and_grads(
    model: &TransitionModel,
    ev: &PreparedEvent,
    dropout_rng: Option<&mut rng::Rng>,
) -> (TransitionLosses, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let bound = Bound::new(model, &mut tape, true);
    let mut d = dropout_rng.map(|rng| Dropout {
        rate: model.config.dropout,
        rng,
    });
    let v = loss_graph(&bound, &mut tape, ev, &mut d);
    let grads = tape.backward(v.total);
    (values(&tape, &v), collect_grads(model, &bound, &grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub seq: f64,
    pub roll: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub epochs: Vec<EpochLoss>,
}

impl LossCurve {
    /// `epoch,L_seq,L_roll,L_trans`, one row per epoch (means over events).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,L_seq,L_roll,L_trans\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.seq, e.roll, e.total);
        }
        out
    }
}

/// AdamW training of `L_trans` over `dataset`, `batch_size` events per
/// step, with global-norm clipping. Deterministic given the model seed.
pub fn train_transition(
    model: &mut TransitionModel,
    dataset: &[EventTimeline],
) -> Result<LossCurve> {
    if dataset.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let prepared = dataset
        .iter()
        .map(|e| prepare_event(model, e))
        .collect::<Result<Vec<_>>>()?;
    train_prepared(model, &prepared)
}

pub fn train_prepared(
    model: &mut TransitionModel,
    prepared: &[PreparedEvent],
) -> Result<LossCurve> {
    let cfg = model.config.clone();
    cfg.validate()?;
    let adam_cfg = AdamWConfig {
        lr: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut adam = AdamW::new(
        adam_cfg,
        &model
            .params
            .iter()
            .map(|t| t.data.len())
            .collect::<Vec<_>>(),
    );
    let mut order_rng = rng::substream(cfg.seed, "transition-order");
    let mut drop_rng = rng::substream(cfg.seed, "transition-dropout");
    let mut curve = LossCurve::default();
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut sum = TransitionLosses {
            seq: 0.0,
            roll: 0.0,
            total: 0.0,
        };
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Vec<f64>> = model
                .params
                .iter()
                .map(|t| vec![0.0; t.data.len()])
                .collect();
            for &i in batch {
                let (l, g) = loss_and_grads(model, &prepared[i], Some(&mut drop_rng));
                sum.seq += l.seq;
                sum.roll += l.roll;
                sum.total += l.total;
                let w = 1.0 / batch.len() as f64;
                for (a, g) in acc.iter_mut().zip(&g) {
                    a.iter_mut().zip(g).for_each(|(a, g)| *a += w * g);
                }
            }
            clip_global_norm(&mut acc, cfg.clip_norm);
            adam.step(&mut model.params, &acc);
        }
        let n = prepared.len() as f64;
        curve.epochs.push(EpochLoss {
            epoch,
            seq: sum.seq / n,
            roll: sum.roll / n,
            total: sum.total / n,
        });
    }
    Ok(curve)
}

/// Central finite differences against the analytic gradient of `L_trans`
/// on one event, dropout off.
pub fn gradient_check(
    model: &TransitionModel,
    event: &EventTimeline,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let ev = prepare_event(model, event)?;
    let (_, grads) = loss_and_grads(model, &ev, None);
    let mut probe = model.clone();
    Ok(check_gradients(
        &model.params,
        &grads,
        opts,
        |params: &[Tensor]| {
            probe.params.clone_from_slice(params);
            prepared_loss(&probe, &ev).total
        },
    ))
}
