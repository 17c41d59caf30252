use proptest::prelude::*;

use super::model::{Bound, EventInputs};
use super::*;
use crate::domain::{EventStep, EventTimeline, MeanField};
use crate::ingest::{synthesize_markov_event, synthesize_reversal_event, MarkovSpec, ReversalSpec};
use crate::optim::GradCheckOptions;
use crate::tape::Tape;

fn small_config() -> TransitionConfig {
    TransitionConfig {
        d_model: 8,
        layers: 2,
        heads: 2,
        d_ff: 12,
        window: 4,
        hash_dims: 6,
        rollout_k: 3,
        ..Default::default()
    }
}

fn model_for(event: &EventTimeline, config: TransitionConfig) -> TransitionModel {
    let layout = ContextLayout {
        hash_dims: config.hash_dims,
        n_states: event.states.len(),
    };
    TransitionModel::new(config, layout).unwrap()
}

fn reversal(h: usize, seed: u64) -> EventTimeline {
    synthesize_reversal_event(&ReversalSpec::new(h, h / 2, 0, 2, seed)).unwrap()
}

fn contexts(model: &TransitionModel, event: &EventTimeline) -> Vec<TransitionContext> {
    let ctx = event_contexts(
        event,
        &model_encoder(model),
        crate::summarizer::DEFAULT_TOKEN_BUDGET,
    );
    (0..ctx.len()).map(|k| ctx.context(k)).collect()
}

fn markov(p: &[Vec<f64>], m0: Vec<f64>, h: usize) -> EventTimeline {
    synthesize_markov_event(&MarkovSpec {
        transition: p.to_vec(),
        initial: MeanField::new(m0).unwrap(),
        horizon: h,
        event_id: "mk".into(),
    })
    .unwrap()
}

#[test]
fn zero_initialized_head_predicts_uniform() {
    let ev = reversal(10, 1);
    let model = model_for(&ev, small_config());
    let m = model.predict(&contexts(&model, &ev)).unwrap();
    for p in m.probs() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn predictions_are_prefix_stable() {
    let ev = reversal(14, 2);
    let mut model = model_for(&ev, small_config());
    model.randomize(5, 0.5);
    let ctx = contexts(&model, &ev);
    for t in 1..ctx.len() {
        let short = model.predict(&ctx[..t]).unwrap();
        let mut longer = ctx[..=t].to_vec();
        longer[t].features.iter_mut().for_each(|v| *v += 3.0);
        let mut state = model.start();
        let mut at_t = None;
        for (i, c) in longer.iter().enumerate() {
            let p = state.push(c).unwrap();
            if i == t - 1 {
                at_t = Some(p);
            }
        }
        assert_eq!(at_t.unwrap(), short);
    }
}

#[test]
fn session_matches_the_training_forward_pass() {
    let ev = reversal(16, 3);
    let mut model = model_for(&ev, small_config());
    model.randomize(11, 0.4);
    let prepared = prepare_event(&model, &ev).unwrap();
    let mut tape = Tape::new();
    let bound = Bound::new(&model, &mut tape, false);
    let main = bound.sequence(&mut tape, &prepared.inputs, &mut None);
    let ctx = contexts(&model, &ev);
    let mut session = Session::new(&model);
    for (t, c) in ctx.iter().enumerate() {
        let p = session.push_features(&c.features).unwrap();
        for (a, b) in p.iter().zip(tape.value(main.preds).row(t)) {
            assert!((a - b).abs() < 1e-12, "position {t}: {a} vs {b}");
        }
    }
    let starts = [0usize, 3, 7];
    let k = 6;
    let preds = bound.branches(
        &mut tape,
        &prepared.inputs,
        &main,
        &starts,
        k,
        None,
        &mut None,
    );
    let targets = ev.mean_fields().unwrap();
    for (b, &tb) in starts.iter().enumerate() {
        let roll = model
            .rollout(&ctx[..=tb], targets[tb], &ctx[tb + 1..], k)
            .unwrap();
        for (step, m) in roll.iter().enumerate() {
            for (a, b2) in m.probs().iter().zip(tape.value(preds[step]).row(b)) {
                assert!(
                    (a - b2).abs() < 1e-12,
                    "branch {tb} step {step}: {a} vs {b2}"
                );
            }
        }
    }
}

#[test]
fn rollout_edge_cases_and_identity_stub() {
    let ev = reversal(12, 4);
    let model = model_for(&ev, small_config());
    let ctx = contexts(&model, &ev);
    let start = MeanField::new(vec![0.2, 0.5, 0.3]).unwrap();
    assert!(model
        .rollout(&ctx[..2], &start, &ctx[2..], 0)
        .unwrap()
        .is_empty());
    assert!(matches!(
        model.rollout(&ctx[..2], &start, &ctx[2..4], 3),
        Err(crate::Error::Horizon(_))
    ));
    let stub = IdentityModel {
        layout: model.layout,
    };
    let roll = stub.rollout(&ctx[..3], &start, &ctx[3..], 8).unwrap();
    assert_eq!(roll.len(), 8);
    assert!(roll.iter().all(|m| *m == start));
    let mut short = ctx[0].clone();
    short.features.pop();
    assert!(matches!(
        model.predict(&[short]),
        Err(crate::Error::Shape(_))
    ));
    assert!(matches!(model.predict(&[]), Err(crate::Error::Shape(_))));
}

#[test]
fn single_step_sequence_loss_is_ln2() {
    let ev = EventTimeline {
        event_id: "one".into(),
        topic: "t".into(),
        personas: Vec::new(),
        steps: vec![EventStep {
            t: 0,
            active: Vec::new(),
            actions: Vec::new(),
            signal: None,
            empirical_mean_field: Some(MeanField::new(vec![1.0, 0.0]).unwrap()),
        }],
        states: crate::domain::StateSpace::new(["yes", "no"]).unwrap(),
        actions: crate::domain::ActionSpace::social(),
    };
    let model = model_for(&ev, small_config());
    let l = transition_loss(&model, &ev).unwrap();
    assert!((l.seq - std::f64::consts::LN_2).abs() < 1e-9, "{}", l.seq);
    assert_eq!(l.roll, 0.0);
}

use super::train::transition_loss;

#[test]
fn alpha_zero_makes_trans_equal_seq() {
    let ev = reversal(12, 5);
    let mut model = model_for(
        &ev,
        TransitionConfig {
            alpha_trans: 0.0,
            ..small_config()
        },
    );
    model.randomize(1, 0.3);
    let l = transition_loss(&model, &ev).unwrap();
    assert!(l.roll > 0.0);
    assert_eq!(l.total, l.seq);
}

#[test]
fn missing_ground_truth_is_reported() {
    let mut ev = reversal(8, 6);
    ev.steps[3].empirical_mean_field = None;
    let model = model_for(&ev, small_config());
    assert!(matches!(
        transition_loss(&model, &ev),
        Err(crate::Error::MissingGroundTruth { .. })
    ));
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let ev = reversal(10, 7);
    let mut model = model_for(
        &ev,
        TransitionConfig {
            learning_rate: 0.0,
            epochs: 2,
            ..small_config()
        },
    );
    let before = model.params.clone();
    train_transition(&mut model, &[ev]).unwrap();
    assert_eq!(model.params, before);
}

#[test]
fn training_is_deterministic_and_csv_shaped() {
    let data = vec![reversal(10, 8), reversal(10, 9)];
    let cfg = TransitionConfig {
        epochs: 3,
        batch_size: 1,
        ..small_config()
    };
    let mut a = model_for(&data[0], cfg.clone());
    let mut b = model_for(&data[0], cfg);
    let ca = train_transition(&mut a, &data).unwrap();
    let cb = train_transition(&mut b, &data).unwrap();
    assert_eq!(ca, cb);
    assert_eq!(a, b);
    let csv = ca.to_csv();
    assert!(csv.starts_with("epoch,L_seq,L_roll,L_trans\n"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn training_reduces_loss_on_a_markov_world() {
    let p = vec![
        vec![0.7, 0.2, 0.1],
        vec![0.1, 0.8, 0.1],
        vec![0.2, 0.2, 0.6],
    ];
    let data: Vec<_> = [
        [0.9, 0.05, 0.05],
        [0.1, 0.1, 0.8],
        [0.3, 0.4, 0.3],
        [0.05, 0.9, 0.05],
    ]
    .iter()
    .map(|m0| markov(&p, m0.to_vec(), 20))
    .collect();
    let cfg = TransitionConfig {
        epochs: 60,
        batch_size: 2,
        learning_rate: 1e-2,
        dropout: 0.0,
        ..small_config()
    };
    let mut model = model_for(&data[0], cfg);
    let curve = train_transition(&mut model, &data).unwrap();
    let first = curve.epochs[0].total;
    let last = curve.epochs.last().unwrap().total;
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn gradient_check_passes_and_detects_corruption() {
    let ev = reversal(9, 10);
    let mut model = model_for(&ev, small_config());
    model.randomize(3, 0.5);
    let opts = GradCheckOptions::default();
    let ok = gradient_check(&model, &ev, &opts).unwrap();
    assert!(ok.pass, "{ok:?}");
    assert!(ok.checked >= model.params.len());
    let again = gradient_check(&model, &ev, &opts).unwrap();
    assert_eq!(ok, again);
    let bad = gradient_check(
        &model,
        &ev,
        &GradCheckOptions {
            backward_scale: 2.0,
            ..opts
        },
    )
    .unwrap();
    assert!(!bad.pass);
}

#[test]
fn input_split_reassembles_the_context() {
    let ev = reversal(6, 12);
    let model = model_for(&ev, small_config());
    let ctx = event_contexts(&ev, &model_encoder(&model), 128);
    let inputs = EventInputs::new(&ctx);
    let l = ctx.layout;
    for t in 0..ctx.len() {
        assert_eq!(inputs.mean_field.row(t), &ctx.inputs.row(t)[l.mean_field()]);
        assert!(inputs.fixed.row(t)[l.actions()].iter().all(|v| *v == 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn predictions_stay_on_the_simplex(seed in 0u64..1000, log_scale in -2.0f64..300.0) {
        let ev = reversal(6, seed % 7);
        let mut model = model_for(&ev, small_config());
        model.randomize(seed, 10f64.powf(log_scale));
        let ctx = contexts(&model, &ev);
        let mut state = model.start();
        for c in &ctx {
            let m = state.push(c).unwrap();
            let s: f64 = m.probs().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(m.probs().iter().all(|p| *p >= 0.0));
        }
    }
}

#[test]
fn lockstep_branches_match_independent_rollouts() {
    let ev = reversal(40, 13);
    let mut model = model_for(&ev, small_config());
    model.randomize(21, 0.4);
    let ctx = contexts(&model, &ev);
    let targets = ev.mean_fields().unwrap();
    let t = 20;
    let mut session = Session::new(&model);
    for c in &ctx[..=t] {
        session.push_features(&c.features).unwrap();
    }
    let mut first: Vec<TransitionContext> = (0..3).map(|_| ctx[t + 1].clone()).collect();
    first[1].set_actions(&[0.6, 0.3, 0.1]);
    first[2].set_actions(&[0.0, 0.0, 1.0]);
    first[2].set_synopsis(ctx[5].synopsis());
    let k = 9;
    let batch = session
        .rollout_batch(targets[t], &first, &ctx[t + 2..], k)
        .unwrap();
    for (b, f) in first.iter().enumerate() {
        let mut fork = session.fork();
        let mut fut = vec![f.clone()];
        fut.extend_from_slice(&ctx[t + 2..t + 1 + k]);
        let solo = rollout_from(fork.as_mut(), targets[t], &fut, k).unwrap();
        assert_eq!(solo.len(), batch[b].len());
        for (x, y) in solo.iter().zip(&batch[b]) {
            for (p, q) in x.probs().iter().zip(y.probs()) {
                assert!((p - q).abs() < 1e-12, "branch {b}: {p} vs {q}");
            }
        }
    }
    assert!(batch[0] != batch[2]);
    assert!(matches!(
        session.rollout_batch(targets[t], &first, &ctx[t + 2..t + 4], k),
        Err(crate::Error::Horizon(_))
    ));
}
