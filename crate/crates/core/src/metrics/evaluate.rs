//! Micro-to-macro comparison of a simulated trajectory against a reference
//! event.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::annotate::{annotate_action, AnnotatorBackend};
use super::divergence::{kl_divergence, wasserstein_distance};
use super::dtw::{downsample, dtw_distance, StepCost};
use super::f1::f1_scores;
use crate::domain::{
    ActionRecord, ActionSpace, EventTimeline, LabelMap, MeanField, StateSpace, Trajectory,
};
use crate::error::{Error, Result};
use crate::labels::LabelDimension;

/// Probability floor of [`nll`].
pub const NLL_FLOOR: f64 = 1e-10;

/// Mean negative log-probability with each probability floored at 1e-10.
pub fn nll(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::EmptySeries);
    }
    Ok(probs.iter().map(|p| -p.max(NLL_FLOOR).ln()).sum::<f64>() / probs.len() as f64)
}

/// Source of exact action probabilities for the reference event's actions.
pub trait ActionLikelihood {
    /// Probability of every ground-truth action of `event`, in step order.
    fn action_probs(&self, event: &EventTimeline) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimensionMetrics {
    pub kl: f64,
    pub wasserstein: f64,
    pub dtw: f64,
    /// Action-level, so not comparable with token-level figures.
    pub nll: Option<f64>,
    pub macro_f1: f64,
    pub micro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepPoint {
    pub t: usize,
    pub dimension: LabelDimension,
    pub kl: f64,
    pub wasserstein: f64,
    pub reference: Vec<f64>,
    pub simulated: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub event_id: String,
    pub horizon: usize,
    pub mode: String,
    pub nll_scale: String,
    pub dimensions: BTreeMap<LabelDimension, DimensionMetrics>,
    pub series: Vec<TimestepPoint>,
    /// Time-averaged `KL(m* || m)` of the macro channel, when the reference
    /// carries m* at every step.
    pub mean_field_kl: Option<f64>,
}

impl MetricReport {
    /// Flat `dimension,metric,value` table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dimension,metric,value\n");
        for (dim, m) in &self.dimensions {
            let rows = [
                ("kl", Some(m.kl)),
                ("wasserstein", Some(m.wasserstein)),
                ("dtw", Some(m.dtw)),
                ("nll", m.nll),
                ("macro_f1", Some(m.macro_f1)),
                ("micro_f1", Some(m.micro_f1)),
            ];
            for (name, v) in rows {
                let v = v.map(|x| x.to_string()).unwrap_or_default();
                let _ = writeln!(out, "{dim},{name},{v}");
            }
        }
        out
    }

    /// Per-timestep `t,dimension,kl,wasserstein` series.
    pub fn series_csv(&self) -> String {
        let mut out = String::from("t,dimension,kl,wasserstein\n");
        for p in &self.series {
            let _ = writeln!(out, "{},{},{},{}", p.t, p.dimension, p.kl, p.wasserstein);
        }
        out
    }
}

pub struct EvalOptions<'a> {
    pub annotator: AnnotatorBackend,
    pub step_cost: StepCost,
    /// Keep every `dtw_stride`-th point of the distribution series for DTW.
    pub dtw_stride: usize,
    pub mode: String,
    pub likelihood: Option<&'a dyn ActionLikelihood>,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        EvalOptions {
            annotator: AnnotatorBackend::Native,
            step_cost: StepCost::L1,
            dtw_stride: 1,
            mode: String::new(),
            likelihood: None,
        }
    }
}

/// Label space a dimension's distributions live on. State uses the event's
/// state space; every other dimension uses its ordinal label order.
pub fn dimension_space(dim: LabelDimension, states: &StateSpace) -> StateSpace {
    match dim {
        LabelDimension::State => states.clone(),
        _ => StateSpace::new(dim.ordinal_labels().iter().copied()).expect("static labels"),
    }
}

/// Labels of each action along the requested dimensions.
struct StepLabels<'a> {
    agents: Vec<&'a str>,
    /// `labels[d][i]`: label of action `i` along dimension `d`.
    labels: Vec<Vec<String>>,
}

fn step_labels<'a>(
    actions: &'a [ActionRecord],
    space: &ActionSpace,
    dims: &[LabelDimension],
    backend: &AnnotatorBackend,
) -> Result<StepLabels<'a>> {
    let mut labels = vec![Vec::with_capacity(actions.len()); dims.len()];
    for a in actions {
        let owned;
        let map: &LabelMap = match &a.labels {
            Some(l) if dims.iter().all(|d| l.contains_key(d)) => l,
            _ => {
                owned = annotate_action(a, space, backend)?;
                &owned
            }
        };
        for (d, dim) in dims.iter().enumerate() {
            labels[d].push(map[dim].clone());
        }
    }
    Ok(StepLabels {
        agents: actions.iter().map(|a| a.agent_id.as_str()).collect(),
        labels,
    })
}

fn histogram(labels: &[String], space: &StateSpace, dim: LabelDimension) -> Result<MeanField> {
    let mut counts = vec![0.0; space.len()];
    for l in labels {
        let i = space.index_of(l).ok_or_else(|| Error::UnknownLabel {
            label: l.clone(),
            context: format!("dimension {dim}"),
        })?;
        counts[i] += 1.0;
    }
    MeanField::from_weights(&counts)
}

/// Pair reference and simulated labels of one step: by agent id when any
/// agent appears on both sides, otherwise by position.
fn pair_labels<'a>(
    r: &'a StepLabels<'_>,
    s: &'a StepLabels<'_>,
    d: usize,
    out: &mut Vec<(&'a str, &'a str)>,
) {
    let by_agent: HashMap<&str, usize> =
        s.agents.iter().enumerate().map(|(i, a)| (*a, i)).collect();
    let before = out.len();
    for (i, a) in r.agents.iter().enumerate() {
        if let Some(&j) = by_agent.get(a) {
            out.push((&r.labels[d][i], &s.labels[d][j]));
        }
    }
    if out.len() == before {
        out.extend(
            r.labels[d]
                .iter()
                .zip(&s.labels[d])
                .map(|(a, b)| (a.as_str(), b.as_str())),
        );
    }
}

/// Compare `simulated` with `reference` along each requested dimension.
pub fn evaluate_trajectories(
    simulated: &Trajectory,
    reference: &EventTimeline,
    dimensions: &[LabelDimension],
    options: &EvalOptions<'_>,
) -> Result<MetricReport> {
    if simulated.horizon() != reference.horizon() {
        return Err(Error::LengthMismatch {
            left: simulated.horizon(),
            right: reference.horizon(),
        });
    }
    let horizon = reference.horizon();
    let mut ref_steps = Vec::with_capacity(horizon);
    let mut sim_steps = Vec::with_capacity(horizon);
    for k in 0..horizon {
        ref_steps.push(step_labels(
            &reference.steps[k].actions,
            &reference.actions,
            dimensions,
            &options.annotator,
        )?);
        sim_steps.push(step_labels(
            &simulated.records[k + 1].actions,
            &reference.actions,
            dimensions,
            &options.annotator,
        )?);
    }

    let nll_value = match options.likelihood {
        Some(l) => Some(nll(&l.action_probs(reference)?)?),
        None => None,
    };

    let mut dims_out = BTreeMap::new();
    let mut series = Vec::new();
    for (d, &dim) in dimensions.iter().enumerate() {
        let space = dimension_space(dim, &reference.states);
        let (mut ref_series, mut sim_series) = (Vec::new(), Vec::new());
        let (mut kl_sum, mut w_sum, mut n) = (0.0, 0.0, 0usize);
        let mut pairs = Vec::new();
        for k in 0..horizon {
            let (r, s) = (&ref_steps[k], &sim_steps[k]);
            pair_labels(r, s, d, &mut pairs);
            if r.agents.is_empty() || s.agents.is_empty() {
                continue;
            }
            let p = histogram(&r.labels[d], &space, dim)?;
            let q = histogram(&s.labels[d], &space, dim)?;
            let kl = kl_divergence(&p, &q)?;
            let w = wasserstein_distance(&p, &q)?;
            kl_sum += kl;
            w_sum += w;
            n += 1;
            series.push(TimestepPoint {
                t: reference.steps[k].t,
                dimension: dim,
                kl,
                wasserstein: w,
                reference: p.probs().to_vec(),
                simulated: q.probs().to_vec(),
            });
            ref_series.push(p);
            sim_series.push(q);
        }
        if n == 0 {
            return Err(Error::EmptySeries);
        }
        let dtw = dtw_distance(
            &downsample(&ref_series, options.dtw_stride),
            &downsample(&sim_series, options.dtw_stride),
            options.step_cost,
        )?;
        let labels: Vec<&str> = space.labels().iter().map(String::as_str).collect();
        let canonical = |l: &str| {
            space
                .index_of(l)
                .map(|i| space.label(i))
                .ok_or_else(|| Error::UnknownLabel {
                    label: l.to_string(),
                    context: format!("dimension {dim}"),
                })
        };
        let mut truth = Vec::with_capacity(pairs.len());
        let mut pred = Vec::with_capacity(pairs.len());
        for (a, b) in pairs {
            truth.push(canonical(a)?);
            pred.push(canonical(b)?);
        }
        let f1 = f1_scores(&truth, &pred, &labels)?;
        dims_out.insert(
            dim,
            DimensionMetrics {
                kl: kl_sum / n as f64,
                wasserstein: w_sum / n as f64,
                dtw,
                nll: nll_value,
                macro_f1: f1.macro_f1,
                micro_f1: f1.micro_f1,
            },
        );
    }

    let mean_field_kl = match reference.mean_fields() {
        Ok(ms) if horizon > 0 => {
            let total: f64 = ms
                .iter()
                .zip(&simulated.records[1..])
                .map(|(m, rec)| kl_divergence(m, &rec.mean_field))
                .sum::<Result<f64>>()?;
            Some(total / horizon as f64)
        }
        _ => None,
    };

    Ok(MetricReport {
        event_id: reference.event_id.clone(),
        horizon,
        mode: options.mode.clone(),
        nll_scale:
            "action-level negative log-likelihood under the tabular policy (nats per action)".into(),
        dimensions: dims_out,
        series,
        mean_field_kl,
    })
}

/// Per-step `KL(m*_t || m_t)` between reference and simulated macro states.
pub fn mean_field_kl_series(simulated: &Trajectory, reference: &EventTimeline) -> Result<Vec<f64>> {
    if simulated.horizon() != reference.horizon() {
        return Err(Error::LengthMismatch {
            left: simulated.horizon(),
            right: reference.horizon(),
        });
    }
    reference
        .mean_fields()?
        .into_iter()
        .zip(&simulated.records[1..])
        .map(|(m, rec): (&MeanField, _)| kl_divergence(m, &rec.mean_field))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::TrajectoryRecord;
    use crate::ingest::{synthesize_reversal_event, ReversalSpec};

    fn replay(ev: &EventTimeline) -> Trajectory {
        let mut records = vec![TrajectoryRecord {
            t: 0,
            mean_field: ev.initial_mean_field(),
            synopsis: String::new(),
            actions: Vec::new(),
        }];
        for s in &ev.steps {
            records.push(TrajectoryRecord {
                t: s.t + 1,
                mean_field: s.empirical_mean_field.clone().unwrap(),
                synopsis: String::new(),
                actions: s.actions.clone(),
            });
        }
        Trajectory {
            event_id: ev.event_id.clone(),
            records,
        }
    }

    struct Half;
    impl ActionLikelihood for Half {
        fn action_probs(&self, ev: &EventTimeline) -> Result<Vec<f64>> {
            Ok(ev
                .steps
                .iter()
                .flat_map(|s| s.actions.iter().map(|_| 0.5))
                .collect())
        }
    }

    #[test]
    fn identical_trajectories_score_perfectly() {
        let ev = synthesize_reversal_event(&ReversalSpec::new(30, 15, 0, 2, 3)).unwrap();
        let opts = EvalOptions {
            likelihood: Some(&Half),
            ..Default::default()
        };
        let report = evaluate_trajectories(&replay(&ev), &ev, &LabelDimension::ALL, &opts).unwrap();
        assert_eq!(report.dimensions.len(), 8);
        for m in report.dimensions.values() {
            assert!(m.kl.abs() < 1e-9);
            assert_eq!(m.wasserstein, 0.0);
            assert_eq!(m.dtw, 0.0);
            assert_eq!(m.macro_f1, 1.0);
            assert_eq!(m.micro_f1, 1.0);
            assert!((m.nll.unwrap() - 2f64.ln()).abs() < 1e-12);
        }
        assert!(report.mean_field_kl.unwrap() < 1e-9);
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 1 + 8 * 6);
        assert!(csv.contains("state,macro_f1,1"));
        let json: serde_json::Value = serde_json::to_value(&report).unwrap();
        let keys: Vec<_> = json["dimensions"]["state"]
            .as_object()
            .unwrap()
            .keys()
            .cloned()
            .collect();
        assert_eq!(
            keys,
            ["kl", "wasserstein", "dtw", "nll", "macro_f1", "micro_f1"]
        );
        assert_eq!(report.series_csv().lines().count(), 1 + 8 * 30);
    }

    #[test]
    fn horizon_mismatch_is_rejected() {
        let ev = synthesize_reversal_event(&ReversalSpec::new(10, 5, 0, 2, 3)).unwrap();
        let mut traj = replay(&ev);
        traj.records.pop();
        let err = evaluate_trajectories(
            &traj,
            &ev,
            &[LabelDimension::State],
            &EvalOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::LengthMismatch { .. }));
    }

    #[test]
    fn flipped_states_are_penalised() {
        let ev = synthesize_reversal_event(&ReversalSpec::new(20, 20, 0, 2, 5)).unwrap();
        let mut traj = replay(&ev);
        for rec in traj.records.iter_mut().skip(1) {
            for a in rec.actions.iter_mut() {
                a.labels = None;
                a.action_index = 5 - (a.action_index / 2) * 2 - (1 - a.action_index % 2);
            }
        }
        let report = evaluate_trajectories(
            &traj,
            &ev,
            &[LabelDimension::State],
            &EvalOptions::default(),
        )
        .unwrap();
        let m = report.dimensions[&LabelDimension::State];
        assert!(
            m.kl > 1.0 && m.wasserstein > 0.5 && m.micro_f1 < 0.5,
            "{m:?}"
        );
        assert_eq!(nll(&[0.0]).unwrap(), -(1e-10f64).ln());
        assert_eq!(nll(&[1.0, 1.0]).unwrap(), 0.0);
    }
}
