use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{PolicyConfig, ReselectMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimMode {
    /// Agents act from micro states drawn from the predicted mean field.
    #[default]
    Stateful,
    /// Agents see only the synopsis and signal; no mean-field prediction.
    StateIgnored,
}

impl std::str::FromStr for SimMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stateful" => Ok(SimMode::Stateful),
            "state-ignored" => Ok(SimMode::StateIgnored),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected stateful or state-ignored)"
            ))),
        }
    }
}

impl std::fmt::Display for SimMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SimMode::Stateful => "stateful",
            SimMode::StateIgnored => "state-ignored",
        })
    }
}

/// Who acts at each simulated step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolPolicy {
    /// The event's recorded active set.
    #[default]
    Replay,
    /// `n` distinct personas drawn uniformly.
    Sample { n: usize },
}

/// Long-horizon reselection of joint actions among dropout candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReselectionConfig {
    pub enabled: bool,
    pub candidates: usize,
    pub lookahead: usize,
    pub discount: f64,
    pub temperature: f64,
    pub dropout: f64,
    pub mode: ReselectMode,
}

impl Default for ReselectionConfig {
    fn default() -> Self {
        ReselectionConfig::from_policy(&PolicyConfig::default(), false)
    }
}

impl ReselectionConfig {
    pub fn from_policy(p: &PolicyConfig, enabled: bool) -> Self {
        ReselectionConfig {
            enabled,
            candidates: p.candidates,
            lookahead: p.lookahead,
            discount: p.discount,
            temperature: p.temperature,
            dropout: p.dropout,
            mode: p.reselection,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Simulated steps; `None` runs the whole event.
    pub horizon: Option<usize>,
    /// Replayed steps; `None` uses `min(10, ⌊T/10⌋)`.
    pub warmup: Option<usize>,
    pub mode: SimMode,
    pub reselection: ReselectionConfig,
    pub pool: PoolPolicy,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            horizon: None,
            warmup: None,
            mode: SimMode::Stateful,
            reselection: ReselectionConfig::default(),
            pool: PoolPolicy::Replay,
            seed: 0,
        }
    }
}

pub fn default_warmup(horizon: usize) -> usize {
    10.min(horizon / 10)
}

impl SimConfig {
    /// Horizon and warm-up length for an event of `event_len` steps.
    pub fn resolve(&self, event_len: usize) -> Result<(usize, usize)> {
        let t = self.horizon.unwrap_or(event_len);
        if t > event_len {
            return Err(Error::Horizon(format!(
                "horizon {t} exceeds the event's {event_len} steps"
            )));
        }
        let warm = self.warmup.unwrap_or_else(|| default_warmup(t));
        if warm > t {
            return Err(Error::Config(format!("warm-up {warm} exceeds horizon {t}")));
        }
        Ok((t, warm))
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.reselection;
        if !r.enabled {
            return Ok(());
        }
        if self.mode != SimMode::Stateful {
            return Err(Error::Config(
                "reselection needs the stateful mode's transition model".into(),
            ));
        }
        if r.candidates == 0 || r.lookahead == 0 {
            return Err(Error::Config(
                "reselection needs at least one candidate and one lookahead step".into(),
            ));
        }
        if !(r.discount > 0.0 && r.discount <= 1.0) {
            return Err(Error::Config(format!(
                "discount {} outside (0, 1]",
                r.discount
            )));
        }
        if !(r.temperature.is_finite() && r.temperature >= 0.0) {
            return Err(Error::Config(format!(
                "temperature {} must be finite and non-negative",
                r.temperature
            )));
        }
        if !(0.0..1.0).contains(&r.dropout) {
            return Err(Error::Rate(r.dropout));
        }
        Ok(())
    }
}
