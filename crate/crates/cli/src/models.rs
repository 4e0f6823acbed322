use std::path::PathBuf;
use std::sync::Arc;

use clap::Args;

use spatialvqa_core::client::{ChatModel, ClientConfig, HttpClient, ScriptedClient};

use crate::error::CliError;

/// How to reach a language model.
#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// Replay canned replies from a script file instead of calling a server.
    #[arg(long, value_name = "FILE", conflicts_with_all = ["client_config", "live"])]
    pub script: Option<PathBuf>,
    /// Client TOML (endpoint, model, retries); env vars override it.
    #[arg(long, value_name = "FILE")]
    pub client_config: Option<PathBuf>,
    /// Use the HTTP client with defaults plus SPATIALVQA_* env vars.
    #[arg(long)]
    pub live: bool,
}

impl ModelArgs {
    pub fn is_set(&self) -> bool {
        self.script.is_some() || self.client_config.is_some() || self.live
    }

    pub fn build(&self) -> Result<Option<Arc<dyn ChatModel>>, CliError> {
        if let Some(path) = &self.script {
            let c = ScriptedClient::from_path(path).map_err(CliError::Usage)?;
            return Ok(Some(Arc::new(c)));
        }
        if self.client_config.is_some() || self.live {
            return http_client(ClientConfig::load(self.client_config.as_deref()).map_err(|e| CliError::Usage(e.to_string()))?)
                .map(Some);
        }
        Ok(None)
    }

    pub fn require(&self, what: &str) -> Result<Arc<dyn ChatModel>, CliError> {
        self.build()?
            .ok_or_else(|| CliError::Usage(format!("{what} needs a model: pass --script, --client-config or --live")))
    }
}

pub fn http_client(cfg: ClientConfig) -> Result<Arc<dyn ChatModel>, CliError> {
    let c = HttpClient::new(cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(Arc::new(c))
}
