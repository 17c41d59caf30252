use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;

use super::*;
use crate::domain::{
    ActionSpace, AgentPersona, AgentState, EventTimeline, ExogenousSignal, MeanField, MicroState,
    StateSpace, Synopsis,
};
use crate::error::Error;
use crate::ingest::{synthesize_reversal_event, ReversalSpec};
use crate::metrics::{kl_divergence, ActionLikelihood};
use crate::optim::GradCheckOptions;
use crate::rng::{self, Rng};
use crate::service::testing::Scripted;
use crate::summarizer::DEFAULT_TOKEN_BUDGET;
use crate::transition::{
    event_contexts, model_encoder, ContextLayout, IdentityModel, MeanFieldModel, TransitionConfig,
    TransitionModel,
};

fn small_policy_config() -> PolicyConfig {
    PolicyConfig {
        hash_dims: 8,
        lookahead: 4,
        candidates: 3,
        steps_per_event: 6,
        epochs: 3,
        ..Default::default()
    }
}

fn small_transition(hash_dims: usize) -> TransitionModel {
    let config = TransitionConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        d_ff: 12,
        window: 4,
        hash_dims,
        rollout_k: 3,
        ..Default::default()
    };
    let mut m = TransitionModel::new(
        config,
        ContextLayout {
            hash_dims,
            n_states: 3,
        },
    )
    .unwrap();
    m.randomize(5, 0.3);
    m
}

fn event(h: usize, seed: u64) -> EventTimeline {
    let mut spec = ReversalSpec::new(h, h / 2, 0, 2, seed);
    spec.agents_per_step = 3;
    spec.pool_size = 6;
    synthesize_reversal_event(&spec).unwrap()
}

struct Fixture {
    synopsis: Synopsis,
    m: MeanField,
    signal: ExogenousSignal,
    persona: AgentPersona,
}

fn fixture() -> Fixture {
    Fixture {
        synopsis: Synopsis::new("rumor | top state positive 70%.", 64),
        m: MeanField::new(vec![0.7, 0.2, 0.1]).unwrap(),
        signal: ExogenousSignal {
            source_id: "src".into(),
            text: "official denial issued".into(),
            timestep: 3,
        },
        persona: AgentPersona {
            agent_id: "a1".into(),
            profile: "retired teacher who reposts".into(),
        },
    }
}

fn micro(f: &Fixture, state: usize) -> MicroState<'_> {
    MicroState {
        state: AgentState::new(state, &StateSpace::polarity()).unwrap(),
        synopsis: &f.synopsis,
        mean_field: &f.m,
        signal: Some(&f.signal),
        persona: &f.persona,
    }
}

fn frequencies(
    policy: &TabularPolicy,
    z: &MicroState<'_>,
    mask: &DropoutMask,
    n: usize,
) -> Vec<f64> {
    let mut r = Rng::seed_from_u64(11);
    let mut counts = vec![0.0; policy.n_actions];
    for _ in 0..n {
        counts[policy.sample(z, mask, &mut r).unwrap()] += 1.0;
    }
    counts.iter().map(|c| c / n as f64).collect()
}

#[test]
fn masks_are_bernoulli_and_reproducible() {
    let mut r = Rng::seed_from_u64(1);
    assert!(sample_mask(50, 0.0, &mut r)
        .unwrap()
        .keep
        .iter()
        .all(|k| *k));
    assert!(matches!(sample_mask(50, 1.0, &mut r), Err(Error::Rate(_))));
    assert!(matches!(sample_mask(50, -0.1, &mut r), Err(Error::Rate(_))));
    let a = sample_mask(200, 0.3, &mut Rng::seed_from_u64(9)).unwrap();
    let b = sample_mask(200, 0.3, &mut Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
    assert_eq!(DropoutMask::from_seed(200, 0.3, a.seed).unwrap(), a);
    let big = sample_mask(20_000, 0.3, &mut r).unwrap();
    let kept = big.kept() as f64 / 20_000.0;
    assert!((kept - 0.7).abs() < 0.02, "keep fraction {kept}");
}

#[test]
fn near_one_hot_logits_pick_their_action() {
    let f = fixture();
    let mut p = TabularPolicy::new(
        PolicyConfig {
            init_scale: 0.0,
            ..small_policy_config()
        },
        3,
        3,
        true,
    )
    .unwrap();
    let bias = p.features.bias();
    p.weights.data[bias * 3..bias * 3 + 3].copy_from_slice(&[10.0, -10.0, -10.0]);
    let z = micro(&f, 1);
    let freq = frequencies(&p, &z, &DropoutMask::full(p.width()), 10_000);
    assert!(freq[0] >= 0.999, "{freq:?}");
}

#[test]
fn fully_dropped_features_give_uniform_actions() {
    let f = fixture();
    let p = TabularPolicy::new(
        PolicyConfig {
            init_scale: 1.0,
            ..small_policy_config()
        },
        3,
        4,
        true,
    )
    .unwrap();
    let none = DropoutMask {
        keep: vec![false; p.width()],
        rate: 0.5,
        seed: 0,
    };
    let z = micro(&f, 0);
    let probs = p.action_probs(&z, &none).unwrap();
    assert!(probs.iter().all(|q| (q - 0.25).abs() < 1e-15));
    for q in frequencies(&p, &z, &none, 10_000) {
        assert!((q - 0.25).abs() <= 0.02, "{q}");
    }
}

#[test]
fn sampling_is_deterministic_given_the_seed() {
    let f = fixture();
    let p = PolicyBackend::Tabular(
        TabularPolicy::new(
            PolicyConfig {
                init_scale: 1.0,
                ..small_policy_config()
            },
            3,
            6,
            true,
        )
        .unwrap(),
    );
    let mask = sample_mask(p.feature_width(), 0.2, &mut Rng::seed_from_u64(4)).unwrap();
    let z = micro(&f, 2);
    let draw = |s| {
        let mut r = Rng::seed_from_u64(s);
        (0..20)
            .map(|_| sample_action(&p, &z, &mask, &mut r).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(draw(3), draw(3));
}

#[test]
fn state_ignored_features_do_not_see_state_or_mean_field() {
    let f = fixture();
    let p = TabularPolicy::new(
        PolicyConfig {
            init_scale: 1.0,
            ..small_policy_config()
        },
        3,
        6,
        false,
    )
    .unwrap();
    let mask = DropoutMask::full(p.width());
    let a = p.action_probs(&micro(&f, 0), &mask).unwrap();
    let other = Fixture {
        m: MeanField::new(vec![0.1, 0.1, 0.8]).unwrap(),
        ..fixture()
    };
    let b = p.action_probs(&micro(&other, 2), &mask).unwrap();
    assert_eq!(a, b);
    let aware = TabularPolicy::new(
        PolicyConfig {
            init_scale: 1.0,
            ..small_policy_config()
        },
        3,
        6,
        true,
    )
    .unwrap();
    let mask = DropoutMask::full(aware.width());
    assert_ne!(
        aware.action_probs(&micro(&f, 0), &mask).unwrap(),
        aware.action_probs(&micro(&f, 2), &mask).unwrap()
    );
}

/// Hand-computed softmax of `(x ⊙ λ)·W` for one agent.
fn oracle_probs(p: &TabularPolicy, x: &[f64], mask: &DropoutMask) -> Vec<f64> {
    let a = p.n_actions;
    let logits: Vec<f64> = (0..a)
        .map(|j| {
            (0..x.len())
                .filter(|&i| mask.keep[i])
                .map(|i| x[i] * p.weights.data[i * a + j])
                .sum()
        })
        .collect();
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    logits.iter().map(|l| l.exp() / z).collect()
}

#[test]
fn joint_log_probability_factorizes_over_agents() {
    let f = fixture();
    let g = Fixture {
        persona: AgentPersona {
            agent_id: "a2".into(),
            profile: "student".into(),
        },
        ..fixture()
    };
    let p = PolicyBackend::Tabular(
        TabularPolicy::new(
            PolicyConfig {
                init_scale: 0.7,
                ..small_policy_config()
            },
            3,
            3,
            true,
        )
        .unwrap(),
    );
    let tab = p.tabular().unwrap();
    let mask = sample_mask(tab.width(), 0.3, &mut Rng::seed_from_u64(2)).unwrap();
    let agents = [micro(&f, 0), micro(&g, 2)];
    let per: Vec<Vec<f64>> = agents
        .iter()
        .map(|z| oracle_probs(tab, &tab.features.encode(z), &mask))
        .collect();
    let mut total = 0.0;
    for a0 in 0..3 {
        for a1 in 0..3 {
            let lp = p.joint_log_prob(&agents, &[a0, a1], &mask).unwrap();
            assert!((lp - (per[0][a0].ln() + per[1][a1].ln())).abs() < 1e-12);
            total += lp.exp();
        }
    }
    assert!((total - 1.0).abs() < 1e-12);
}

fn constant_contexts(
    layout: ContextLayout,
    m: &MeanField,
    n: usize,
) -> Vec<crate::transition::TransitionContext> {
    let enc = crate::transition::ContextEncoder::new(layout.hash_dims, layout.n_states, 0);
    (0..n)
        .map(|_| enc.encode(&Synopsis::empty(8), m, m, std::iter::empty(), None))
        .collect()
}

#[test]
fn long_horizon_cost_examples() {
    let layout = ContextLayout {
        hash_dims: 4,
        n_states: 3,
    };
    let model = IdentityModel { layout };
    let m = MeanField::new(vec![0.5, 0.3, 0.2]).unwrap();
    let ctx = constant_contexts(layout, &m, 6);
    let state = model.start();
    // The identity surrogate reproduces a constant truth exactly.
    let truth = vec![m.clone(); 5];
    assert_eq!(
        long_horizon_cost(state.as_ref(), &m, &ctx[0], &ctx[1..], &truth, 5, 0.9).unwrap(),
        0.0
    );
    // K = 1 is the single-step KL whatever the discount.
    let t1 = MeanField::new(vec![0.2, 0.5, 0.3]).unwrap();
    let kl = kl_divergence(&t1, &m).unwrap();
    for g in [0.1, 0.5, 1.0] {
        let v = long_horizon_cost(
            state.as_ref(),
            &m,
            &ctx[0],
            &ctx[1..],
            std::slice::from_ref(&t1),
            1,
            g,
        )
        .unwrap();
        assert!((v - kl).abs() < 1e-15);
    }
    assert!(matches!(
        long_horizon_cost(state.as_ref(), &m, &ctx[0], &ctx[1..], &truth[..2], 3, 0.9),
        Err(Error::Horizon(_))
    ));
    // Two steps with γ = 0.5: first KL plus half the second.
    let t2 = MeanField::new(vec![0.1, 0.1, 0.8]).unwrap();
    let (k1, k2) = (
        kl_divergence(&t1, &m).unwrap(),
        kl_divergence(&t2, &m).unwrap(),
    );
    let v = discounted_cost(&[t1.clone(), t2.clone()], &[m.clone(), m.clone()], 2, 0.5).unwrap();
    assert!((v - (k1 + 0.5 * k2)).abs() < 1e-15);
}

#[test]
fn weights_match_hand_cases() {
    let w = candidate_weights(&[0.0, 3f64.ln()], 1.0);
    assert!((w[0] - 0.75).abs() < 1e-12 && (w[1] - 0.25).abs() < 1e-12);
    for beta in [1e-3, 1.0, 50.0] {
        assert!(candidate_weights(&[1.3; 4], beta)
            .iter()
            .all(|x| (x - 0.25).abs() < 1e-15));
    }
    let w = candidate_weights(&[0.0, 5.0, 20.0], 1e-8);
    assert!(w.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-6));
    assert_eq!(candidate_weights(&[7.0], 3.0), vec![1.0]);
    // Max shift keeps huge costs finite.
    let w = candidate_weights(&[1e6, 1e6 + 1.0], 1.0);
    assert!((w[0] - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-12);
}

#[test]
fn reselection_rules() {
    let full = DropoutMask::full(2);
    let set = |costs: &[f64], beta: f64| {
        CandidateSet::new(
            costs.iter().map(|c| (full.clone(), vec![0], *c)).collect(),
            beta,
            0.9,
            3,
        )
        .unwrap()
    };
    let mut r = Rng::seed_from_u64(0);
    let s = set(&[0.0, 3f64.ln()], 1.0);
    assert_eq!(reselect_actions(&s, ReselectMode::Deterministic, &mut r), 0);
    assert_eq!(
        reselect_actions(&set(&[2.0], 1.0), ReselectMode::Stochastic, &mut r),
        0
    );
    assert_eq!(
        reselect_actions(
            &set(&[0.4, 0.4, 0.4], 1.0),
            ReselectMode::Deterministic,
            &mut r
        ),
        0
    );
    assert_eq!(
        reselect_actions(
            &set(&[0.9, 0.2, 0.4], 1.0),
            ReselectMode::Deterministic,
            &mut r
        ),
        1
    );
    // β → ∞ concentrates stochastic reselection on the cheapest candidate.
    let sharp = set(&[0.5, 0.4, 0.6], 100.0);
    let hits = (0..10_000)
        .filter(|_| reselect_actions(&sharp, ReselectMode::Stochastic, &mut r) == 1)
        .count();
    assert!(hits as f64 / 10_000.0 >= 0.99, "{hits}");
    // Stochastic frequencies follow the weights.
    let hits = (0..20_000)
        .filter(|_| reselect_actions(&s, ReselectMode::Stochastic, &mut r) == 0)
        .count();
    assert!((hits as f64 / 20_000.0 - 0.75).abs() < 0.015);
    assert!(CandidateSet::new(Vec::new(), 1.0, 0.9, 3).is_err());
}

proptest! {
    #[test]
    fn weights_are_normalized_and_monotone(
        costs in proptest::collection::vec(0.0f64..50.0, 1..10),
        beta in 1e-6f64..100.0,
    ) {
        let w = candidate_weights(&costs, beta);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for i in 0..costs.len() {
            for j in 0..costs.len() {
                if costs[i] <= costs[j] {
                    prop_assert!(w[i] >= w[j]);
                }
            }
        }
    }

    #[test]
    fn linear_variance_bound_always_holds(
        logits in proptest::collection::vec(-6.0f64..6.0, 2..10),
        raw in proptest::collection::vec(-1.0f64..1.0, 10),
        m in 0.1f64..10.0,
    ) {
        let mut probs = logits.clone();
        crate::tape::softmax_in_place(&mut probs);
        let rewards: Vec<f64> = raw[..probs.len()].iter().map(|r| r * m).collect();
        let c = variance_bound(&probs, &rewards, m).unwrap();
        prop_assert!(c.variance <= c.linear_bound + 1e-12);
    }
}

#[test]
fn variance_bound_examples() {
    let c = variance_bound(&[1.0, 0.0, 0.0], &[0.3, -1.0, 1.0], 1.0).unwrap();
    assert_eq!((c.variance, c.bound), (0.0, 0.0));
    assert!(c.pass);
    let c = variance_bound(&[0.5, 0.5], &[1.0, -1.0], 1.0).unwrap();
    assert!((c.variance - 1.0).abs() < 1e-15 && (c.bound - 1.0).abs() < 1e-15 && c.pass);
    // With π(a*) = 0.9 the squared bound is 0.04; rewards clustered near
    // a*'s respect it.
    let c = variance_bound(&[0.9, 0.1], &[0.5, 0.9], 1.0).unwrap();
    assert!((c.bound - 0.04).abs() < 1e-15 && c.pass);
    assert!(matches!(
        variance_bound(&vec![1.0 / 65.0; 65], &[0.0; 65], 1.0),
        Err(Error::Enumeration(_))
    ));
    assert!(variance_bound(&[0.5, 0.5], &[2.0, 0.0], 1.0).is_err());
}

#[test]
fn squared_variance_bound_fails_for_spread_rewards() {
    // Rewards ±1 with π(a*) = 0.9: variance 4·0.9·0.1 = 0.36 against a
    // squared bound of 0.04. The linear form 4M²(1 − π(a*)) = 0.4 holds.
    let c = variance_bound(&[0.9, 0.1], &[1.0, -1.0], 1.0).unwrap();
    assert!((c.variance - 0.36).abs() < 1e-12);
    assert!(!c.pass);
    assert!(c.variance <= c.linear_bound);
}

#[test]
fn policy_variance_check_uses_the_masked_distribution() {
    let f = fixture();
    let p = TabularPolicy::new(
        PolicyConfig {
            init_scale: 0.0,
            ..small_policy_config()
        },
        3,
        4,
        true,
    )
    .unwrap();
    let c = variance_bound_check(
        &p,
        &micro(&f, 0),
        &DropoutMask::full(p.width()),
        &[1.0, -1.0, 1.0, -1.0],
        1.0,
    )
    .unwrap();
    assert!((c.top_prob - 0.25).abs() < 1e-15 && (c.variance - 1.0).abs() < 1e-15);
    assert!((c.bound - 4.0 * 0.75 * 0.75).abs() < 1e-12 && c.pass);
}

#[test]
fn parser_takes_the_earliest_then_longest_label() {
    let space = ActionSpace::new(["share", "share_positive", "comment"]).unwrap();
    assert_eq!(
        parse_action("I would COMMENT, maybe share", &space),
        Some(2)
    );
    assert_eq!(parse_action("share_positive it is", &space), Some(1));
    assert_eq!(parse_action("share now", &space), Some(0));
    assert_eq!(parse_action("nothing fits", &space), None);
}

fn external(responses: Vec<crate::Result<String>>) -> (ExternalPolicy, Arc<Scripted>) {
    struct Shared(Arc<Scripted>);
    impl crate::service::TextService for Shared {
        fn generate(&self, r: &crate::service::GenerateRequest) -> crate::Result<String> {
            self.0.generate(r)
        }
    }
    let s = Arc::new(Scripted::new(responses));
    let p = ExternalPolicy::new(
        Box::new(Shared(s.clone())),
        StateSpace::polarity(),
        ActionSpace::social(),
        true,
    );
    (p, s)
}

#[test]
fn external_policy_prompts_parses_and_retries_once() {
    let f = fixture();
    let z = micro(&f, 0);
    let mut r = Rng::seed_from_u64(0);
    let (p, s) = external(vec![Ok("I'd go with comment_negative.".into())]);
    assert_eq!(
        p.sample(&z, &mut r).unwrap(),
        ActionSpace::social().index_of("comment_negative").unwrap()
    );
    let prompt = s.prompts.lock().unwrap()[0].clone();
    for needle in [
        "retired teacher",
        "top state positive 70%",
        "positive 70%",
        "official denial",
        "share_neutral",
        "stance: positive",
    ] {
        assert!(prompt.contains(needle), "missing `{needle}` in {prompt}");
    }

    let (p, s) = external(vec![Ok("hmm".into()), Ok("share_positive".into())]);
    assert_eq!(p.sample(&z, &mut r).unwrap(), 0);
    assert_eq!(s.calls(), 2);

    let (p, s) = external(vec![
        Ok("hmm".into()),
        Ok("still unsure".into()),
        Ok("share_positive".into()),
    ]);
    assert!(matches!(p.sample(&z, &mut r), Err(Error::Parse(_))));
    assert_eq!(s.calls(), 2);

    let (p, _) = external(vec![Err(Error::Service("down".into()))]);
    assert!(matches!(p.sample(&z, &mut r), Err(Error::Service(_))));
    let backend = PolicyBackend::External(p);
    assert_eq!(backend.feature_width(), 0);
    assert!(matches!(
        backend.action_probs(&z, &DropoutMask::full(0)),
        Err(Error::Backend(_))
    ));
}

#[test]
fn checkpoint_round_trip_and_validation() {
    let p = TabularPolicy::new(
        PolicyConfig {
            init_scale: 0.3,
            ..small_policy_config()
        },
        3,
        6,
        true,
    )
    .unwrap();
    assert_eq!(TabularPolicy::from_json(&p.to_json().unwrap()).unwrap(), p);
    let mut bad = p.clone();
    bad.weights.data.pop();
    assert!(matches!(
        TabularPolicy::from_json(&bad.to_json().unwrap()),
        Err(Error::Checkpoint(_))
    ));
    let mut v: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
    v["version"] = 7.into();
    assert!(TabularPolicy::from_json(&v.to_string()).is_err());
}

#[test]
fn text_loss_is_ln2_for_even_odds() {
    // Two actions and zero weights: every ground-truth action has π = 0.5.
    let mut ev = event(6, 3);
    ev.actions = ActionSpace::new(["a", "b"]).unwrap();
    for step in &mut ev.steps {
        for (i, a) in step.actions.iter_mut().enumerate() {
            a.action_index = i % 2;
            a.labels = None;
        }
    }
    let model = small_transition(8);
    let cfg = PolicyConfig {
        init_scale: 0.0,
        ..small_policy_config()
    };
    let p = PolicyBackend::Tabular(TabularPolicy::new(cfg, 3, 2, true).unwrap());
    let l = policy_loss(&p, &[ev], &model).unwrap();
    assert!((l.text - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn loss_composition_and_degenerate_cases() {
    let ev = event(10, 4);
    let model = small_transition(8);
    let base = TabularPolicy::new(
        PolicyConfig {
            init_scale: 0.2,
            ..small_policy_config()
        },
        3,
        6,
        true,
    )
    .unwrap();
    let l = policy_loss(
        &PolicyBackend::Tabular(base.clone()),
        std::slice::from_ref(&ev),
        &model,
    )
    .unwrap();
    assert!(l.pred > 0.0 && l.text > 0.0 && l.total.is_finite());
    assert!((l.total - (l.pred + 0.5 * l.text)).abs() < 1e-12);

    let mut zero = base.clone();
    zero.config.text_weight = 0.0;
    let l0 = policy_loss(
        &PolicyBackend::Tabular(zero),
        std::slice::from_ref(&ev),
        &model,
    )
    .unwrap();
    assert_eq!(l0.total, l0.pred);

    // A uniform world and a uniform surrogate: every rollout is exact.
    let mut flat = ev.clone();
    for s in &mut flat.steps {
        s.empirical_mean_field = Some(MeanField::uniform(3));
    }
    let uniform_model = TransitionModel::new(model.config.clone(), model.layout).unwrap();
    let lf = policy_loss(
        &PolicyBackend::Tabular(base.clone()),
        &[flat],
        &uniform_model,
    )
    .unwrap();
    assert!(lf.pred.abs() < 1e-12, "{}", lf.pred);
    assert!((lf.total - 0.5 * lf.text).abs() < 1e-12);

    let (ext, _) = external(vec![]);
    assert!(matches!(
        policy_loss(&PolicyBackend::External(ext), &[ev], &model),
        Err(Error::Backend(_))
    ));
}

#[test]
fn single_candidate_loss_matches_inference_rollouts() {
    // J = 1 with no dropout: L_pred is the unweighted cost of rolling the
    // session forward with the expected action-state histogram.
    let ev = event(12, 6);
    let model = small_transition(8);
    let cfg = PolicyConfig {
        candidates: 1,
        dropout: 0.0,
        steps_per_event: 0,
        lookahead: 4,
        init_scale: 0.5,
        ..small_policy_config()
    };
    let policy = TabularPolicy::new(cfg.clone(), 3, 6, true).unwrap();
    let pe = prepare_policy_event(&policy, &model, &ev).unwrap();
    let plan = plan_event(&pe, &policy, &mut Rng::seed_from_u64(0)).unwrap();
    let (losses, _) = event_loss_and_grad(&policy, &model, &pe, &plan);

    let enc = model_encoder(&model);
    let ctx = event_contexts(&ev, &enc, DEFAULT_TOKEN_BUDGET);
    let ctxs: Vec<_> = (0..ctx.len()).map(|k| ctx.context(k)).collect();
    let truth: Vec<MeanField> = ev.mean_fields().unwrap().into_iter().cloned().collect();
    let views = super::train::replay_views(&ev, &policy.features);
    let mask = DropoutMask::full(policy.width());
    let last = ev.horizon() - 1;
    let mut total = 0.0;
    let mut n = 0.0;
    let mut state = model.start();
    for k in 0..last {
        state.push(&ctxs[k]).unwrap();
        let step = &ev.steps[k];
        let mut hist = vec![0.0; 3];
        for a in &step.actions {
            let s = ev.actions.state_of(a.action_index, &ev.states).unwrap();
            let mut row = vec![0.0; policy.width()];
            let persona = policy
                .features
                .persona_block(ev.persona(&a.agent_id).unwrap());
            views[k].features.agent_into(s, &persona, &mut row);
            let probs = policy.probs(&row, &mask).unwrap();
            for (act, p) in probs.iter().enumerate() {
                hist[ev.actions.state_of(act, &ev.states).unwrap()] +=
                    p / step.actions.len() as f64;
            }
        }
        let mut first = ctxs[k + 1].clone();
        first.set_actions(&hist);
        let steps = cfg.lookahead.min(last - k);
        let v = candidate_costs(
            state.as_ref(),
            &truth[k],
            &[first],
            &ctxs[k + 2..],
            &truth[k + 1..],
            steps,
            cfg.discount,
        )
        .unwrap();
        total += v[0];
        n += 1.0;
    }
    assert!(
        (losses.pred - total / n).abs() < 1e-10,
        "{} vs {}",
        losses.pred,
        total / n
    );
}

#[test]
fn policy_gradients_match_finite_differences() {
    let ev = event(10, 7);
    let model = small_transition(8);
    let policy = TabularPolicy::new(
        PolicyConfig {
            init_scale: 0.5,
            ..small_policy_config()
        },
        3,
        6,
        true,
    )
    .unwrap();
    let opts = GradCheckOptions {
        per_tensor: 40,
        ..Default::default()
    };
    let good = policy_gradient_check(&policy, &model, &ev, &opts).unwrap();
    assert!(good.pass, "{good:?}");
    let bad = policy_gradient_check(
        &policy,
        &model,
        &ev,
        &GradCheckOptions {
            backward_scale: 1.01,
            ..opts
        },
    )
    .unwrap();
    assert!(!bad.pass);
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let ev = event(10, 8);
    let model = small_transition(8);
    let cfg = PolicyConfig {
        learning_rate: 0.0,
        init_scale: 0.3,
        ..small_policy_config()
    };
    let mut p = PolicyBackend::Tabular(TabularPolicy::new(cfg, 3, 6, true).unwrap());
    let before = p.tabular().unwrap().weights.clone();
    let curve = train_policy(&mut p, &[ev], &model).unwrap();
    assert_eq!(curve.epochs.len(), 3);
    assert_eq!(p.tabular().unwrap().weights, before);
    assert!(curve.to_csv().starts_with("epoch,L_pred,L_text,L_total\n"));
}

#[test]
fn training_lowers_text_loss_and_is_deterministic() {
    let data: Vec<EventTimeline> = (0..3).map(|s| event(24, 20 + s)).collect();
    let model = small_transition(8);
    let cfg = PolicyConfig {
        epochs: 12,
        learning_rate: 0.05,
        ..small_policy_config()
    };
    let run = || {
        let mut p = TabularPolicy::new(cfg.clone(), 3, 6, true).unwrap();
        let c = train_tabular(&mut p, &data, &model).unwrap();
        (p, c)
    };
    let (p1, c1) = run();
    let (p2, c2) = run();
    assert_eq!(p1, p2);
    assert_eq!(c1, c2);
    let first = c1.epochs.first().unwrap().text;
    let last = c1.epochs.last().unwrap().text;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn likelihood_marginalizes_the_agent_state() {
    let ev = event(6, 9);
    let flat = TabularPolicy::new(
        PolicyConfig {
            init_scale: 0.0,
            ..small_policy_config()
        },
        3,
        6,
        true,
    )
    .unwrap();
    let probs = PolicyLikelihood { policy: &flat }
        .action_probs(&ev)
        .unwrap();
    assert_eq!(
        probs.len(),
        ev.steps.iter().map(|s| s.actions.len()).sum::<usize>()
    );
    assert!(probs.iter().all(|p| (p - 1.0 / 6.0).abs() < 1e-12));

    let mut sharp = flat.clone();
    let a = sharp.n_actions;
    // State one-hot s strongly favours the comment action of polarity s.
    for s in 0..3 {
        sharp.weights.data[s * a + 2 * s + 1] = 8.0;
    }
    let probs = PolicyLikelihood { policy: &sharp }
        .action_probs(&ev)
        .unwrap();
    let mut i = 0;
    for step in &ev.steps {
        let m = step.empirical_mean_field.as_ref().unwrap();
        for act in &step.actions {
            let s = ev.actions.state_of(act.action_index, &ev.states).unwrap();
            let oracle: f64 = (0..3)
                .map(|st| {
                    let mut logits = vec![0.0; a];
                    logits[2 * st + 1] = 8.0;
                    let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
                    m.get(st) * logits[act.action_index].exp() / z
                })
                .sum();
            let _ = s;
            assert!((probs[i] - oracle).abs() < 1e-12);
            i += 1;
        }
    }
}

#[test]
fn rng_substreams_keep_plans_reproducible() {
    let ev = event(10, 10);
    let model = small_transition(8);
    let p = TabularPolicy::new(small_policy_config(), 3, 6, true).unwrap();
    let pe = prepare_policy_event(&p, &model, &ev).unwrap();
    let a = plan_event(&pe, &p, &mut rng::substream(1, "x")).unwrap();
    let b = plan_event(&pe, &p, &mut rng::substream(1, "x")).unwrap();
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.masks, b.masks);
    assert_eq!(a.steps.len(), 6);
}
