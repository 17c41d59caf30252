use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use mfmdp::domain::{EventTimeline, MeanField};
use mfmdp::ingest::{
    load_event_with, synthesize_markov_event, synthesize_regime_event, synthesize_reversal_event,
    to_json, validate_event, ReversalSpec,
};
use mfmdp::metrics::{evaluate_trajectories, mean_field_kl_series, EvalOptions};
use mfmdp::optim::GradCheckOptions;
use mfmdp::policy::{
    policy_gradient_check, train_tabular, ExternalPolicy, PolicyBackend, PolicyLikelihood,
    TabularPolicy,
};
use mfmdp::rng::substream_seed;
use mfmdp::service::{HttpTextService, ServiceConfig};
use mfmdp::simulator::{
    check_self_strengthening, detect_flip, read_trajectory_jsonl, run_simulation,
    trajectory_to_jsonl, Backends, DriftMethod, SimMode, StateIgnoredDynamics,
};
use mfmdp::summarizer::{Summarizer, TemplateSummarizer};
use mfmdp::transition::{gradient_check, train_transition, ContextLayout, TransitionModel};

use crate::config::{PolicyKind, RunConfig, SummarizerKind};
use crate::failure::Failure;

/// Sustained steps before a majority change counts as a flip.
const FLIP_SUSTAIN: usize = 10;

/// Output root of one command. Every file a command writes goes through
/// [`RunDir::write`].
struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Create the directory and echo the resolved config into it.
    fn create(command: &str, cfg: &mut RunConfig) -> Result<Self, Failure> {
        let root = match &cfg.out {
            Some(p) => p.clone(),
            None => std::path::absolute(Path::new("runs").join(command))?,
        };
        cfg.out = Some(root.clone());
        std::fs::create_dir_all(&root)?;
        let dir = RunDir { root };
        dir.write("config.json", &pretty(cfg)?)?;
        Ok(dir)
    }

    fn write(&self, rel: &str, content: &str) -> Result<PathBuf, Failure> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, content)?;
        Ok(path)
    }
}

fn pretty<T: Serialize>(value: &T) -> Result<String, Failure> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Failure::domain(format!("serialize: {e}")))?;
    s.push('\n');
    Ok(s)
}

/// File-name-safe form of an event id.
fn stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn load_events(cfg: &RunConfig) -> Result<Vec<EventTimeline>, Failure> {
    if cfg.events.is_empty() {
        return Err(Failure::usage("no event files given"));
    }
    cfg.events
        .iter()
        .map(|p| {
            load_event_with(p, cfg.strictness)
                .map(|(ev, _)| ev)
                .map_err(|e| Failure::domain(format!("{}: {e}", p.display())))
        })
        .collect()
}

fn load_model(cfg: &RunConfig) -> Result<TransitionModel, Failure> {
    let path = cfg
        .transition_model
        .as_ref()
        .ok_or_else(|| Failure::usage("a transition model checkpoint is required (--model)"))?;
    Ok(TransitionModel::load(path)?)
}

fn load_policy(cfg: &RunConfig) -> Result<TabularPolicy, Failure> {
    let path = cfg
        .policy_model
        .as_ref()
        .ok_or_else(|| Failure::usage("a policy checkpoint is required (--policy)"))?;
    Ok(TabularPolicy::load(path)?)
}

fn service(cfg: &RunConfig) -> Result<&ServiceConfig, Failure> {
    cfg.backends.service.as_ref().ok_or_else(|| {
        Failure::usage(format!(
            "external backends need {} (or backends.service in the config)",
            mfmdp::service::ENV_ENDPOINT
        ))
    })
}

fn emit(value: &serde_json::Value) {
    println!("{value}");
}

pub fn dispatch(command: &str, mut cfg: RunConfig) -> Result<(), Failure> {
    match command {
        "simulate" | "train-transition" | "train-policy" => {
            cfg.require_seed(command)?;
        }
        "prop1" if !cfg.prop1.exact => {
            cfg.require_seed("prop1 (without --exact)")?;
        }
        _ => {}
    }
    cfg.resolve()?;
    let dir = RunDir::create(command, &mut cfg)?;
    match command {
        "ingest" => ingest(&cfg, &dir),
        "synth" => synth(&cfg, &dir),
        "train-transition" => train_transition_cmd(&cfg, &dir),
        "train-policy" => train_policy_cmd(&cfg, &dir),
        "simulate" => simulate(&cfg, &dir),
        "evaluate" => evaluate(&cfg, &dir),
        "prop1" => prop1(&cfg, &dir),
        "gradcheck" => gradcheck(&cfg, &dir),
        other => Err(Failure::usage(format!("unknown subcommand `{other}`"))),
    }
}

fn ingest(cfg: &RunConfig, dir: &RunDir) -> Result<(), Failure> {
    if cfg.events.is_empty() {
        return Err(Failure::usage("no event files given"));
    }
    let mut rows = Vec::new();
    let mut bad = 0;
    for path in &cfg.events {
        match load_event_with(path, cfg.strictness) {
            Ok((ev, warnings)) => {
                let findings: Vec<String> =
                    validate_event(&ev).iter().map(|f| f.to_string()).collect();
                let written = if findings.is_empty() {
                    let rel = format!("events/{}.json", stem(&ev.event_id));
                    Some(dir.write(&rel, &to_json(&ev)?)?)
                } else {
                    bad += 1;
                    None
                };
                rows.push(json!({
                    "path": path,
                    "event_id": ev.event_id,
                    "horizon": ev.horizon(),
                    "valid": findings.is_empty(),
                    "warnings": warnings,
                    "findings": findings,
                    "written": written,
                }));
            }
            Err(e) => {
                bad += 1;
                rows.push(json!({ "path": path, "valid": false, "error": e.to_string() }));
            }
        }
    }
    dir.write("report.json", &pretty(&rows)?)?;
    emit(&json!({ "command": "ingest", "events": rows.len(), "invalid": bad }));
    if bad > 0 {
        return Err(Failure::domain(format!(
            "{bad} of {} event files are invalid; see {}",
            rows.len(),
            dir.root.join("report.json").display()
        )));
    }
    Ok(())
}

fn synth(cfg: &RunConfig, dir: &RunDir) -> Result<(), Failure> {
    let s = &cfg.synth;
    let mut events = Vec::new();
    for spec in &s.reversals {
        events.push(synthesize_reversal_event(spec)?);
    }
    for spec in &s.regimes {
        events.push(synthesize_regime_event(spec)?);
    }
    for spec in &s.markov {
        events.push(synthesize_markov_event(spec)?);
    }
    if events.is_empty() {
        return Err(Failure::usage(
            "the config's `synth` section lists no specs",
        ));
    }
    let mut written = Vec::new();
    for (i, ev) in events.iter().enumerate() {
        let rel = format!("events/{i:03}-{}.json", stem(&ev.event_id));
        written.push(dir.write(&rel, &to_json(ev)?)?);
    }
    emit(&json!({ "command": "synth", "events": written }));
    Ok(())
}

fn train_transition_cmd(cfg: &RunConfig, dir: &RunDir) -> Result<(), Failure> {
    let events = load_events(cfg)?;
    let layout = ContextLayout {
        hash_dims: cfg.transition.hash_dims,
        n_states: events[0].states.len(),
    };
    let mut model = TransitionModel::new(cfg.transition.clone(), layout)?;
    let curve = train_transition(&mut model, &events)?;
    let path = dir.root.join("model.json");
    dir.write("model.json", &model.to_json()?)?;
    dir.write("loss.csv", &curve.to_csv())?;
    emit(&json!({
        "command": "train-transition",
        "model": path,
        "parameters": model.param_count(),
        "final_loss": curve.epochs.last().map(|e| e.total),
    }));
    Ok(())
}

fn train_policy_cmd(cfg: &RunConfig, dir: &RunDir) -> Result<(), Failure> {
    if cfg.backends.policy != PolicyKind::Tabular {
        return Err(Failure::usage("only the tabular policy is trainable"));
    }
    let events = load_events(cfg)?;
    let model = load_model(cfg)?;
    let aware = cfg.mode() == SimMode::Stateful;
    let mut policy = TabularPolicy::new(
        cfg.policy.clone(),
        events[0].states.len(),
        events[0].actions.len(),
        aware,
    )?;
    let curve = train_tabular(&mut policy, &events, &model)?;
    let path = dir.root.join("policy.json");
    dir.write("policy.json", &policy.to_json()?)?;
    dir.write("loss.csv", &curve.to_csv())?;
    emit(&json!({
        "command": "train-policy",
        "policy": path,
        "state_aware": aware,
        "final_loss": curve.epochs.last().map(|e| e.total),
    }));
    Ok(())
}

fn policy_backend(cfg: &RunConfig, ev: &EventTimeline) -> Result<PolicyBackend, Failure> {
    Ok(match cfg.backends.policy {
        PolicyKind::Tabular => PolicyBackend::Tabular(load_policy(cfg)?),
        PolicyKind::External => PolicyBackend::External(ExternalPolicy::new(
            Box::new(HttpTextService::new(service(cfg)?.clone())),
            ev.states.clone(),
            ev.actions.clone(),
            cfg.mode() == SimMode::Stateful,
        )),
    })
}

fn summarizer(cfg: &RunConfig, ev: &EventTimeline) -> Result<Summarizer, Failure> {
    let template = TemplateSummarizer::new(ev.topic.clone(), ev.states.clone(), ev.actions.clone());
    Ok(match cfg.backends.summarizer {
        SummarizerKind::Template => Summarizer::Template(template),
        SummarizerKind::External => Summarizer::External {
            service: Box::new(HttpTextService::new(service(cfg)?.clone())),
            template,
            fallback: cfg.backends.summarizer_fallback,
        },
    })
}

fn simulate(cfg: &RunConfig, dir: &RunDir) -> Result<(), Failure> {
    let events = load_events(cfg)?;
    let model = match cfg.mode() {
        SimMode::Stateful => Some(load_model(cfg)?),
        SimMode::StateIgnored => None,
    };
    let mut summary = Vec::new();
    for ev in &events {
        let policy = policy_backend(cfg, ev)?;
        let summarizer = summarizer(cfg, ev)?;
        let backends = Backends {
            policy: &policy,
            summarizer: &summarizer,
            transition: model.as_ref().map(|m| m as _),
        };
        let traj = run_simulation(ev, &cfg.simulation, backends)?;
        let (_, warm) = cfg.simulation.resolve(ev.horizon())?;
        let ms: Vec<MeanField> = traj.records.iter().map(|r| r.mean_field.clone()).collect();
        let kl = mean_field_kl_series(&traj, ev)
            .ok()
            .filter(|s| !s.is_empty())
            .map(|s| s.iter().sum::<f64>() / s.len() as f64);
        let rel = format!("trajectories/{}.jsonl", stem(&ev.event_id));
        let path = dir.write(&rel, &trajectory_to_jsonl(&traj, ev)?)?;
        summary.push(json!({
            "event_id": ev.event_id,
            "mode": cfg.mode().to_string(),
            "horizon": traj.horizon(),
            "warmup": warm,
            "flip_step": detect_flip(&ms, warm, FLIP_SUSTAIN),
            "mean_field_kl": kl,
            "trajectory": path,
        }));
    }
    dir.write("summary.json", &pretty(&summary)?)?;
    emit(&json!({ "command": "simulate", "runs": summary }));
    Ok(())
}

fn evaluate(cfg: &RunConfig, dir: &RunDir) -> Result<(), Failure> {
    let events = load_events(cfg)?;
    if cfg.trajectories.len() != events.len() {
        return Err(Failure::usage(format!(
            "{} trajectories for {} events; pass one --trajectory per event",
            cfg.trajectories.len(),
            events.len()
        )));
    }
    let policy = cfg
        .policy_model
        .as_ref()
        .map(|_| load_policy(cfg))
        .transpose()?;
    let likelihood = policy.as_ref().map(|policy| PolicyLikelihood { policy });
    let options = EvalOptions {
        step_cost: cfg.evaluate.step_cost,
        dtw_stride: cfg.evaluate.dtw_stride.max(1),
        mode: cfg.mode().to_string(),
        likelihood: likelihood.as_ref().map(|l| l as _),
        ..Default::default()
    };
    let mut out = Vec::new();
    for (ev, path) in events.iter().zip(&cfg.trajectories) {
        let text = std::fs::read_to_string(path)?;
        let traj = read_trajectory_jsonl(&text, ev)
            .map_err(|e| Failure::domain(format!("{}: {e}", path.display())))?;
        let report = evaluate_trajectories(&traj, ev, &cfg.evaluate.dims, &options)?;
        let s = stem(&ev.event_id);
        dir.write(&format!("reports/{s}.json"), &pretty(&report)?)?;
        dir.write(&format!("reports/{s}.csv"), &report.to_csv())?;
        dir.write(&format!("reports/{s}-series.csv"), &report.series_csv())?;
        out.push(json!({
            "event_id": report.event_id,
            "dimensions": report.dimensions,
            "mean_field_kl": report.mean_field_kl,
        }));
    }
    emit(&json!({ "command": "evaluate", "reports": out }));
    Ok(())
}

fn prop1(cfg: &RunConfig, dir: &RunDir) -> Result<(), Failure> {
    let p = &cfg.prop1;
    if !(0.0..=1.0).contains(&p.eta) || !(0.0..=1.0).contains(&p.eps) {
        return Err(Failure::usage("--eta and --eps must lie in [0, 1]"));
    }
    let m = MeanField::new(p.mean_field.clone())?;
    let method = if p.exact {
        DriftMethod::Exact
    } else {
        let seed = cfg.require_seed("prop1")?;
        DriftMethod::MonteCarlo {
            runs: p.runs,
            seed: substream_seed(seed, "prop1"),
        }
    };
    let dynamics = StateIgnoredDynamics {
        alignment: p.eta,
        summary_error: p.eps,
    };
    let check = check_self_strengthening(&dynamics, &m, p.eta, p.eps, p.agents, method)?;
    dir.write("report.json", &pretty(&check)?)?;
    emit(&json!({
        "command": "prop1",
        "majority_drift": check.measured,
        "bound": check.bound,
        "tolerance": check.tolerance,
        "standard_error": check.report.standard_error,
        "pass": check.pass,
    }));
    if !check.pass {
        return Err(Failure::domain(format!(
            "majority drift {} is below the bound {} (tolerance {})",
            check.measured, check.bound, check.tolerance
        )));
    }
    Ok(())
}

fn gradcheck(cfg: &RunConfig, dir: &RunDir) -> Result<(), Failure> {
    let seed = cfg.seed.unwrap_or(0);
    let g = &cfg.gradcheck;
    let event = if cfg.events.is_empty() {
        let h = g.horizon.max(2);
        let mut spec = ReversalSpec::new(h, h / 2, 0, 2, substream_seed(seed, "gradcheck.event"));
        spec.agents_per_step = 3;
        spec.pool_size = 6;
        synthesize_reversal_event(&spec)?
    } else {
        load_events(cfg)?.swap_remove(0)
    };
    let model = match &cfg.transition_model {
        Some(_) => load_model(cfg)?,
        None => {
            let layout = ContextLayout {
                hash_dims: cfg.transition.hash_dims,
                n_states: event.states.len(),
            };
            let mut m = TransitionModel::new(cfg.transition.clone(), layout)?;
            m.randomize(substream_seed(seed, "gradcheck.model"), g.init_scale);
            m
        }
    };
    let policy = match &cfg.policy_model {
        Some(_) => load_policy(cfg)?,
        None => TabularPolicy::new(
            cfg.policy.clone(),
            event.states.len(),
            event.actions.len(),
            cfg.mode() == SimMode::Stateful,
        )?,
    };
    let opts = GradCheckOptions {
        tolerance: g.tolerance,
        per_tensor: g.per_tensor,
        seed,
        ..Default::default()
    };
    let transition = gradient_check(&model, &event, &opts)?;
    let policy = policy_gradient_check(&policy, &model, &event, &opts)?;
    let report = json!({ "transition": transition, "policy": policy });
    dir.write("report.json", &pretty(&report)?)?;
    emit(&json!({
        "command": "gradcheck",
        "transition_max_relative_error": transition.max_relative_error,
        "policy_max_relative_error": policy.max_relative_error,
        "pass": transition.pass && policy.pass,
    }));
    if !(transition.pass && policy.pass) {
        return Err(Failure::domain("gradient check failed; see report.json"));
    }
    Ok(())
}
