use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mfmdp::ingest::{MarkovSpec, RegimeSpec, ReversalSpec, Strictness};
use mfmdp::labels::LabelDimension;
use mfmdp::metrics::StepCost;
use mfmdp::policy::PolicyConfig;
use mfmdp::rng::substream_seed;
use mfmdp::service::ServiceConfig;
use mfmdp::simulator::{SimConfig, SimMode};
use mfmdp::transition::TransitionConfig;

use crate::failure::Failure;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    #[default]
    Tabular,
    External,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SummarizerKind {
    #[default]
    Template,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub policy: PolicyKind,
    pub summarizer: SummarizerKind,
    /// Fall back to the template renderer when the summary service fails.
    pub summarizer_fallback: bool,
    /// Endpoint settings; the environment wins when it names an endpoint.
    pub service: Option<ServiceConfig>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            policy: PolicyKind::Tabular,
            summarizer: SummarizerKind::Template,
            summarizer_fallback: true,
            service: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub reversals: Vec<ReversalSpec>,
    pub regimes: Vec<RegimeSpec>,
    pub markov: Vec<MarkovSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub dims: Vec<LabelDimension>,
    pub dtw_stride: usize,
    pub step_cost: StepCost,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            dims: vec![LabelDimension::State],
            dtw_stride: 1,
            step_cost: StepCost::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prop1Config {
    /// Expected extra mass agents put on the current majority.
    pub eta: f64,
    /// Majority mass the summary may lose.
    pub eps: f64,
    pub agents: usize,
    pub mean_field: Vec<f64>,
    pub exact: bool,
    pub runs: usize,
}

impl Default for Prop1Config {
    fn default() -> Self {
        Prop1Config {
            eta: 0.05,
            eps: 0.0,
            agents: 8,
            mean_field: vec![0.6, 0.3, 0.1],
            exact: false,
            runs: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    /// Length of the synthetic event used when no event file is given.
    pub horizon: usize,
    /// Standard deviation of the random transition weights.
    pub init_scale: f64,
    pub per_tensor: usize,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            horizon: 10,
            init_scale: 0.3,
            per_tensor: 4,
            tolerance: 1e-4,
        }
    }
}

/// Everything a run needs. Loaded from one JSON file, then overridden by
/// flags, then echoed into the run directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; component seeds are derived from it.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub events: Vec<PathBuf>,
    pub trajectories: Vec<PathBuf>,
    pub transition_model: Option<PathBuf>,
    pub policy_model: Option<PathBuf>,
    pub strictness: Strictness,
    pub transition: TransitionConfig,
    pub policy: PolicyConfig,
    pub simulation: SimConfig,
    pub backends: BackendConfig,
    pub synth: SynthConfig,
    pub evaluate: EvaluateConfig,
    pub prop1: Prop1Config,
    pub gradcheck: GradcheckConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Failure::usage(format!("bad config {}: {e}", path.display())))
    }

    pub fn mode(&self) -> SimMode {
        self.simulation.mode
    }

    pub fn require_seed(&self, command: &str) -> Result<u64, Failure> {
        self.seed.ok_or_else(|| {
            Failure::usage(format!(
                "`{command}` needs --seed (or `seed` in the config)"
            ))
        })
    }

    /// Push the master seed into every component and make all paths
    /// absolute, checking that inputs exist.
    pub fn resolve(&mut self) -> Result<(), Failure> {
        if let Some(seed) = self.seed {
            self.transition.seed = substream_seed(seed, "transition");
            self.policy.seed = substream_seed(seed, "policy");
            self.simulation.seed = seed;
            for (i, s) in self.synth.reversals.iter_mut().enumerate() {
                s.seed = substream_seed(seed, &format!("synth.reversal.{i}"));
            }
            for (i, s) in self.synth.regimes.iter_mut().enumerate() {
                s.seed = substream_seed(seed, &format!("synth.regime.{i}"));
            }
        }
        let inputs = self
            .events
            .iter_mut()
            .chain(self.trajectories.iter_mut())
            .chain(self.transition_model.iter_mut())
            .chain(self.policy_model.iter_mut());
        for p in inputs {
            *p = absolute(p)?;
            if !p.exists() {
                return Err(Failure::usage(format!(
                    "input {} does not exist",
                    p.display()
                )));
            }
        }
        if let Some(out) = &mut self.out {
            *out = absolute(out)?;
        }
        Ok(())
    }
}

fn absolute(p: &Path) -> Result<PathBuf, Failure> {
    std::path::absolute(p).map_err(|e| Failure::usage(format!("bad path {}: {e}", p.display())))
}
