use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::DEFAULT_PROMPT_TOKEN_CAP;

pub const ENV_ENDPOINT: &str = "SPATIALVQA_ENDPOINT";
pub const ENV_API_KEY: &str = "SPATIALVQA_API_KEY";
pub const ENV_MODEL: &str = "SPATIALVQA_MODEL";
pub const ENV_TIMEOUT: &str = "SPATIALVQA_TIMEOUT_SECS";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read client config {path}: {message}")]
    Read { path: String, message: String },
    #[error("invalid value for {key}: {value}")]
    Invalid { key: &'static str, value: String },
}

/// Endpoint settings for [`super::HttpClient`].
///
/// Resolution order, later wins: built-in defaults, the TOML config file,
/// environment variables, explicit overrides applied by the caller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    /// Base URL; `/v1/chat/completions` is appended unless already present.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: f64,
    pub prompt_token_cap: usize,
    pub max_in_flight: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:30000".into(),
            api_key: None,
            model: "default".into(),
            max_retries: 3,
            backoff_ms: 200,
            timeout_secs: 60.0,
            prompt_token_cap: DEFAULT_PROMPT_TOKEN_CAP,
            max_in_flight: 8,
        }
    }
}

impl ClientConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Read { path: "<inline>".into(), message: e.to_string() })
    }

    /// File (optional) then environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| ConfigError::Read { path: p.display().to_string(), message: e.to_string() })?;
                toml::from_str(&text)
                    .map_err(|e| ConfigError::Read { path: p.display().to_string(), message: e.to_string() })?
            }
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = get(ENV_ENDPOINT) {
            self.endpoint = v;
        }
        if let Some(v) = get(ENV_API_KEY) {
            self.api_key = Some(v);
        }
        if let Some(v) = get(ENV_MODEL) {
            self.model = v;
        }
        if let Some(v) = get(ENV_TIMEOUT) {
            self.timeout_secs = v
                .parse()
                .ok()
                .filter(|t: &f64| *t > 0.0)
                .ok_or(ConfigError::Invalid { key: ENV_TIMEOUT, value: v })?;
        }
        Ok(())
    }

    pub fn completions_url(&self) -> String {
        let base = self.endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else if base.ends_with("/v1") {
            format!("{base}/chat/completions")
        } else {
            format!("{base}/v1/chat/completions")
        }
    }
}
