//! One-step drift of the mean field under a sampled-then-aggregated
//! dynamics, by exhaustive enumeration of outcome histograms or by Monte
//! Carlo.

use serde::{Deserialize, Serialize};

use crate::domain::{majority_state, MeanField};
use crate::error::{Error, Result};
use crate::policy::sample_categorical;
use crate::rng::{substream, Rng};

/// Largest multinomial support the exact mode will enumerate.
pub const SUPPORT_CAP: u64 = 1_000_000;

/// A one-step map: each of `n` agents draws a state from `action_probs(m)`
/// independently, then `aggregate` turns the realized histogram into the
/// next mean field.
pub trait OneStepDynamics {
    fn action_probs(&self, m: &[f64]) -> Vec<f64>;
    fn aggregate(&self, m: &[f64], histogram: &[f64]) -> Vec<f64>;
}

/// Next mean field equals the current one.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityDynamics;

impl OneStepDynamics for IdentityDynamics {
    fn action_probs(&self, m: &[f64]) -> Vec<f64> {
        m.to_vec()
    }

    fn aggregate(&self, m: &[f64], _histogram: &[f64]) -> Vec<f64> {
        m.to_vec()
    }
}

/// Dynamics without micro states: agents lean toward the current majority
/// by `alignment` in expectation, and the summary of their actions loses up
/// to `summary_error` of the majority's share.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateIgnoredDynamics {
    pub alignment: f64,
    pub summary_error: f64,
}

impl OneStepDynamics for StateIgnoredDynamics {
    fn action_probs(&self, m: &[f64]) -> Vec<f64> {
        let top = majority_of(m);
        let p_top = (m[top] + self.alignment).clamp(0.0, 1.0);
        let rest = 1.0 - m[top];
        m.iter()
            .enumerate()
            .map(|(s, &v)| {
                if s == top {
                    p_top
                } else if rest > 0.0 {
                    v * (1.0 - p_top) / rest
                } else {
                    (1.0 - p_top) / (m.len() - 1) as f64
                }
            })
            .collect()
    }

    fn aggregate(&self, m: &[f64], histogram: &[f64]) -> Vec<f64> {
        let top = majority_of(m);
        let mut out = histogram.to_vec();
        let n = out.len();
        if n < 2 {
            return out;
        }
        let moved = self.summary_error.min(out[top]).max(0.0);
        out[top] -= moved;
        for (s, v) in out.iter_mut().enumerate() {
            if s != top {
                *v += moved / (n - 1) as f64;
            }
        }
        out
    }
}

fn majority_of(m: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in m.iter().enumerate() {
        if v > m[best] {
            best = i;
        }
    }
    best
}

/// Enumeration or sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftMethod {
    Exact,
    MonteCarlo { runs: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    /// `E[m_{t+1}(s)] − m(s)` per state.
    pub drift: Vec<f64>,
    pub majority: usize,
    pub majority_drift: f64,
    /// Standard error of the majority drift; zero when exact.
    pub standard_error: f64,
    pub n_agents: usize,
    /// Monte Carlo runs, zero when exact.
    pub runs: usize,
    /// The majority drift when computed by enumeration.
    pub exact: Option<f64>,
}

fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * u128::from(n - i) / u128::from(i + 1);
        if acc > u128::from(u64::MAX) {
            return u64::MAX;
        }
    }
    acc as u64
}

/// Number of histograms of `n` agents over `s` states.
pub fn support_size(n: usize, s: usize) -> u64 {
    if s == 0 {
        return 0;
    }
    binomial((n + s - 1) as u64, (s - 1) as u64)
}

/// Visit every composition of `n` into `counts.len()` parts.
fn compositions(counts: &mut [usize], i: usize, left: usize, visit: &mut dyn FnMut(&[usize])) {
    if i + 1 == counts.len() {
        counts[i] = left;
        visit(counts);
        return;
    }
    for c in (0..=left).rev() {
        counts[i] = c;
        compositions(counts, i + 1, left - c, visit);
    }
}

fn exact_expectation(dynamics: &dyn OneStepDynamics, m: &[f64], n: usize) -> Result<Vec<f64>> {
    let s = m.len();
    let size = support_size(n, s);
    if size > SUPPORT_CAP {
        return Err(Error::Enumeration(format!(
            "{size} histograms for {n} agents over {s} states exceeds the cap of {SUPPORT_CAP}"
        )));
    }
    let p = dynamics.action_probs(m);
    let ln_p: Vec<f64> = p.iter().map(|v| v.ln()).collect();
    let mut ln_fact = vec![0.0; n + 1];
    for i in 1..=n {
        ln_fact[i] = ln_fact[i - 1] + (i as f64).ln();
    }
    let mut expected = vec![0.0; s];
    let mut comp = vec![0.0; s];
    let mut hist = vec![0.0; s];
    let mut counts = vec![0usize; s];
    compositions(&mut counts, 0, n, &mut |c| {
        let mut ln_w = ln_fact[n];
        for (j, &cj) in c.iter().enumerate() {
            if cj > 0 {
                if p[j] <= 0.0 {
                    return;
                }
                ln_w += cj as f64 * ln_p[j] - ln_fact[cj];
            }
        }
        let w = ln_w.exp();
        for (h, &cj) in hist.iter_mut().zip(c) {
            *h = if n > 0 { cj as f64 / n as f64 } else { 0.0 };
        }
        let next = if n > 0 {
            dynamics.aggregate(m, &hist)
        } else {
            m.to_vec()
        };
        // Compensated summation keeps the total at double precision.
        for j in 0..s {
            let y = w * next[j] - comp[j];
            let t = expected[j] + y;
            comp[j] = (t - expected[j]) - y;
            expected[j] = t;
        }
    });
    Ok(expected)
}

fn sample_histogram(p: &[f64], n: usize, rng: &mut Rng, out: &mut [f64]) {
    out.fill(0.0);
    for _ in 0..n {
        out[sample_categorical(p, rng)] += 1.0;
    }
    if n > 0 {
        out.iter_mut().for_each(|v| *v /= n as f64);
    }
}

/// Expected one-step change of the mean field `m` with `n_agents` agents.
pub fn expected_drift(
    dynamics: &dyn OneStepDynamics,
    m: &MeanField,
    n_agents: usize,
    method: DriftMethod,
) -> Result<DriftReport> {
    let probs = m.probs();
    let majority = majority_state(m);
    match method {
        DriftMethod::Exact => {
            let e = exact_expectation(dynamics, probs, n_agents)?;
            let drift: Vec<f64> = e.iter().zip(probs).map(|(a, b)| a - b).collect();
            Ok(DriftReport {
                majority_drift: drift[majority],
                exact: Some(drift[majority]),
                drift,
                majority,
                standard_error: 0.0,
                n_agents,
                runs: 0,
            })
        }
        DriftMethod::MonteCarlo { runs, seed } => {
            if runs < 2 {
                return Err(Error::Config(
                    "Monte Carlo drift needs at least two runs".into(),
                ));
            }
            let p = dynamics.action_probs(probs);
            let mut rng = substream(seed, "drift");
            let s = probs.len();
            let (mut mean, mut m2) = (vec![0.0; s], vec![0.0; s]);
            let mut hist = vec![0.0; s];
            for r in 0..runs {
                sample_histogram(&p, n_agents, &mut rng, &mut hist);
                let next = if n_agents > 0 {
                    dynamics.aggregate(probs, &hist)
                } else {
                    probs.to_vec()
                };
                for j in 0..s {
                    let d = next[j] - probs[j];
                    let delta = d - mean[j];
                    mean[j] += delta / (r + 1) as f64;
                    m2[j] += delta * (d - mean[j]);
                }
            }
            let var = m2[majority] / (runs - 1) as f64;
            Ok(DriftReport {
                majority_drift: mean[majority],
                drift: mean,
                majority,
                standard_error: (var / runs as f64).sqrt(),
                n_agents,
                runs,
                exact: None,
            })
        }
    }
}

/// Outcome of checking `δm(s*) ≥ η − ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfStrengthening {
    pub pass: bool,
    pub measured: f64,
    pub bound: f64,
    pub tolerance: f64,
    pub report: DriftReport,
}

/// Check the majority-drift lower bound `alignment − summary_error`
/// claimed for `dynamics`.
pub fn check_self_strengthening(
    dynamics: &dyn OneStepDynamics,
    m: &MeanField,
    alignment: f64,
    summary_error: f64,
    n_agents: usize,
    method: DriftMethod,
) -> Result<SelfStrengthening> {
    let report = expected_drift(dynamics, m, n_agents, method)?;
    let bound = alignment - summary_error;
    let tolerance = match method {
        DriftMethod::Exact => 1e-12,
        DriftMethod::MonteCarlo { .. } => 3.0 * report.standard_error,
    };
    Ok(SelfStrengthening {
        pass: report.majority_drift >= bound - tolerance,
        measured: report.majority_drift,
        bound,
        tolerance,
        report,
    })
}
