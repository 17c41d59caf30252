//! The simulation loop: warm-up replay, micro states drawn from the
//! predicted mean field, policy sampling with optional long-horizon
//! reselection, and a state-ignored baseline. Also hosts the one-step drift
//! laboratory.

pub mod config;
pub mod drift;
pub mod io;
pub mod run;

pub use config::{default_warmup, PoolPolicy, ReselectionConfig, SimConfig, SimMode};
pub use drift::{
    check_self_strengthening, expected_drift, support_size, DriftMethod, DriftReport,
    IdentityDynamics, OneStepDynamics, SelfStrengthening, StateIgnoredDynamics, SUPPORT_CAP,
};
pub use io::{read_trajectory_jsonl, trajectory_to_jsonl, write_trajectory_jsonl};
pub use run::{detect_flip, refresh_pool, run_simulation, Backends};

