//! Client for an external text-generation service.
//!
//! Wire protocol: `POST <endpoint>` with JSON `{prompt, max_tokens,
//! temperature, seed?}`, answered by JSON `{text}`. An optional bearer token
//! is sent in the `Authorization` header.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment variable holding the service endpoint URL.
pub const ENV_ENDPOINT: &str = "MFMDP_SERVICE_URL";
/// Environment variable holding the bearer token.
pub const ENV_TOKEN: &str = "MFMDP_SERVICE_TOKEN";
/// Environment variable holding the per-call timeout in milliseconds.
pub const ENV_TIMEOUT_MS: &str = "MFMDP_SERVICE_TIMEOUT_MS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub text: String,
}

/// Anything that turns a prompt into text.
pub trait TextService: Send + Sync {
    fn generate(&self, request: &GenerateRequest) -> Result<String>;
}

/// Endpoint settings, usually read once from the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub endpoint: String,
    #[serde(default, skip_serializing)]
    pub token: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    30_000
}

impl ServiceConfig {
    /// `None` when no endpoint variable is set.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var(ENV_ENDPOINT).ok().filter(|s| !s.is_empty())?;
        let token = std::env::var(ENV_TOKEN).ok().filter(|s| !s.is_empty());
        let timeout_ms = std::env::var(ENV_TIMEOUT_MS)
            .ok()
            .and_then(|s| s.parse().ok())
            .unwrap_or_else(default_timeout_ms);
        Some(ServiceConfig {
            endpoint,
            token,
            timeout_ms,
        })
    }
}

/// Blocking HTTP implementation of [`TextService`].
pub struct HttpTextService {
    config: ServiceConfig,
    agent: ureq::Agent,
}

impl HttpTextService {
    pub fn new(config: ServiceConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .build()
            .into();
        HttpTextService { config, agent }
    }
}

impl TextService for HttpTextService {
    fn generate(&self, request: &GenerateRequest) -> Result<String> {
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(token) = &self.config.token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(request)
            .map_err(|e| Error::Service(format!("{}: {e}", self.config.endpoint)))?;
        let body: GenerateResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Service(format!("malformed response: {e}")))?;
        Ok(body.text)
    }
}
