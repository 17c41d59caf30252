//! `mfmdp`: event ingestion, synthesis, training, simulation, evaluation
//! and the drift lab, each writing into its own run directory.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mfmdp::labels::LabelDimension;
use mfmdp::service::ServiceConfig;
use mfmdp::simulator::SimMode;

use config::RunConfig;
use failure::Failure;

#[derive(Parser)]
#[command(name = "mfmdp", version, about = "Mean-field MDP simulation runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct Inputs {
    /// Event files, replacing `events` from the config.
    events: Vec<PathBuf>,
    /// Transition model checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Policy checkpoint.
    #[arg(long)]
    policy: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate event files and write them in canonical form.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Generate synthetic events from the config's `synth` specs.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train the transition model.
    TrainTransition {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Train a tabular policy against a frozen transition model.
    TrainPolicy {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// `stateful` trains a state-aware policy, `state-ignored` a blind one.
        #[arg(long)]
        mode: Option<SimMode>,
    },
    /// Simulate events.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        mode: Option<SimMode>,
    },
    /// Compare simulated trajectories with their reference events.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// Trajectory files, paired with the events in order.
        #[arg(long = "trajectory")]
        trajectories: Vec<PathBuf>,
        /// Comma-separated label dimensions.
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<LabelDimension>>,
    },
    /// One-step majority drift of state-ignored dynamics.
    Prop1 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        agents: Option<usize>,
        /// Enumerate every outcome instead of sampling.
        #[arg(long)]
        exact: bool,
    },
    /// Finite-difference check of the training gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        mode: Option<SimMode>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Synth { .. } => "synth",
            Command::TrainTransition { .. } => "train-transition",
            Command::TrainPolicy { .. } => "train-policy",
            Command::Simulate { .. } => "simulate",
            Command::Evaluate { .. } => "evaluate",
            Command::Prop1 { .. } => "prop1",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Ingest { common, .. }
            | Command::Synth { common }
            | Command::TrainTransition { common, .. }
            | Command::TrainPolicy { common, .. }
            | Command::Simulate { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Prop1 { common, .. }
            | Command::Gradcheck { common, .. } => common,
        }
    }

    /// Config file, then flags.
    fn run_config(&self) -> Result<RunConfig, Failure> {
        let common = self.common();
        let mut cfg = match &common.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if common.seed.is_some() {
            cfg.seed = common.seed;
        }
        if common.out.is_some() {
            cfg.out.clone_from(&common.out);
        }
        match self {
            Command::Ingest { inputs, .. } | Command::TrainTransition { inputs, .. } => {
                apply_inputs(&mut cfg, inputs)
            }
            Command::TrainPolicy { inputs, mode, .. }
            | Command::Simulate { inputs, mode, .. }
            | Command::Gradcheck { inputs, mode, .. } => {
                apply_inputs(&mut cfg, inputs);
                if let Some(m) = mode {
                    cfg.simulation.mode = *m;
                }
            }
            Command::Evaluate {
                inputs,
                trajectories,
                dims,
                ..
            } => {
                apply_inputs(&mut cfg, inputs);
                if !trajectories.is_empty() {
                    cfg.trajectories.clone_from(trajectories);
                }
                if let Some(d) = dims {
                    cfg.evaluate.dims.clone_from(d);
                }
            }
            Command::Prop1 {
                eta,
                eps,
                agents,
                exact,
                ..
            } => {
                let p = &mut cfg.prop1;
                p.eta = eta.unwrap_or(p.eta);
                p.eps = eps.unwrap_or(p.eps);
                p.agents = agents.unwrap_or(p.agents);
                p.exact |= *exact;
            }
            Command::Synth { .. } => {}
        }
        Ok(cfg)
    }
}

fn apply_inputs(cfg: &mut RunConfig, inputs: &Inputs) {
    if !inputs.events.is_empty() {
        cfg.events.clone_from(&inputs.events);
    }
    if inputs.model.is_some() {
        cfg.transition_model.clone_from(&inputs.model);
    }
    if inputs.policy.is_some() {
        cfg.policy_model.clone_from(&inputs.policy);
    }
}

fn run(cli: Cli, service: Option<ServiceConfig>) -> Result<(), Failure> {
    let name = cli.command.name();
    let mut cfg = cli.command.run_config()?;
    if let Some(svc) = service {
        cfg.backends.service = Some(svc);
    }
    commands::dispatch(name, cfg)
}

fn main() -> ExitCode {
    // Service settings are read once, before anything else runs.
    let service = ServiceConfig::from_env();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            Failure::usage(e.render().to_string().trim_end()).report();
            return ExitCode::from(failure::EXIT_USAGE as u8);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli, service) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            f.report();
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
