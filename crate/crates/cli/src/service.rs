//! Reward and score service.
//!
//! Endpoints (JSON over HTTP/1.1):
//!
//! * `POST /v1/reward`: one rollout, by `qa_id` or inline `qa`.
//! * `POST /v1/reward/group`: G rollouts of one question.
//! * `POST /v1/score`: a batch of responses against the loaded manifest.
//! * `GET /healthz`: readiness, never authenticated.
//!
//! Request and response schemas are in `docs/service.md`.

use std::collections::HashMap;
use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use tokio::net::TcpListener;
use tokio::sync::Semaphore;

use spatialvqa_core::client::{ChatModel, ClientConfig, ClientError, ScriptedClient};
use spatialvqa_core::response::Defect;
use spatialvqa_core::reward::{
    compute_rewards_detailed, group_rewards, RewardConfig, RewardError, RewardVector, ENGINE_VERSION,
};
use spatialvqa_core::scoring::{evaluate, EvalConfig, PairingMode, ResponseRecord, ScoreReport};
use spatialvqa_core::taskgen::{read_manifest, BenchmarkManifest, QaPair};

use crate::commands::read_toml;
use crate::error::CliError;
use crate::models::{http_client, ModelArgs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub manifest: Option<PathBuf>,
    /// Requests handled at once; the next one gets 503.
    pub max_concurrent: usize,
    /// Shared bearer token for `/v1/*`.
    pub token: Option<String>,
    pub reward: RewardConfig,
    /// HTTP verifier for the logic channel.
    pub verifier: Option<ClientConfig>,
    /// Scripted verifier, for offline runs.
    pub verifier_script: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            manifest: None,
            max_concurrent: 16,
            token: None,
            reward: RewardConfig::default(),
            verifier: None,
            verifier_script: None,
        }
    }
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Service config TOML; flags below override it.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_name = "ADDR")]
    pub bind: Option<String>,
    #[arg(long, value_name = "N")]
    pub max_concurrent: Option<usize>,
    /// Reward config TOML, replacing the `[reward]` table.
    #[arg(long, value_name = "FILE")]
    pub reward_config: Option<PathBuf>,
    /// Require `Authorization: Bearer TOKEN` on /v1 endpoints.
    #[arg(long, env = "SPATIALVQA_SERVICE_TOKEN", hide_env_values = true)]
    pub token: Option<String>,
    /// Verifier model for the logic channel.
    #[command(flatten)]
    pub model: ModelArgs,
}

impl ServeArgs {
    fn resolve(&self) -> Result<ServiceConfig, CliError> {
        let mut cfg: ServiceConfig = match &self.config {
            Some(p) => read_toml(p)?,
            None => ServiceConfig::default(),
        };
        if let Some(m) = &self.manifest {
            cfg.manifest = Some(m.clone());
        }
        if let Some(b) = &self.bind {
            cfg.bind = b.clone();
        }
        if let Some(n) = self.max_concurrent {
            cfg.max_concurrent = n;
        }
        if let Some(p) = &self.reward_config {
            cfg.reward = read_toml(p)?;
        }
        if self.token.is_some() {
            cfg.token = self.token.clone();
        }
        Ok(cfg)
    }
}

pub struct AppState {
    manifest: BenchmarkManifest,
    index: HashMap<String, usize>,
    reward: RewardConfig,
    verifier: Option<Arc<dyn ChatModel>>,
    permits: Arc<Semaphore>,
    token: Option<String>,
}

impl AppState {
    pub fn new(
        manifest: BenchmarkManifest,
        reward: RewardConfig,
        verifier: Option<Arc<dyn ChatModel>>,
        max_concurrent: usize,
        token: Option<String>,
    ) -> Result<Self, CliError> {
        manifest.validate()?;
        reward.validate()?;
        if max_concurrent == 0 {
            return Err(CliError::Usage("max_concurrent must be at least 1".into()));
        }
        let index = manifest.qa.iter().enumerate().map(|(i, q)| (q.qa_id.clone(), i)).collect();
        Ok(Self { manifest, index, reward, verifier, permits: Arc::new(Semaphore::new(max_concurrent)), token })
    }

    /// Loads the manifest and builds the verifier named by `cfg`.
    pub fn from_config(cfg: &ServiceConfig, verifier: Option<Arc<dyn ChatModel>>) -> Result<Self, CliError> {
        let path = cfg.manifest.as_deref().ok_or_else(|| CliError::Usage("no manifest: set `manifest` or pass --manifest".into()))?;
        let manifest = read_manifest(path)?;
        let verifier = match (verifier, &cfg.verifier_script, &cfg.verifier) {
            (Some(v), _, _) => Some(v),
            (None, Some(p), _) => Some(Arc::new(ScriptedClient::from_path(p).map_err(CliError::Usage)?) as Arc<dyn ChatModel>),
            (None, None, Some(c)) => Some(http_client(c.clone())?),
            (None, None, None) => None,
        };
        Self::new(manifest, cfg.reward.clone(), verifier, cfg.max_concurrent, cfg.token.clone())
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let v1 = Router::new()
        .route("/v1/reward", post(reward))
        .route("/v1/reward/group", post(reward_group))
        .route("/v1/score", post(score))
        .route_layer(middleware::from_fn_with_state(state.clone(), auth));
    Router::new().route("/healthz", get(healthz)).merge(v1).with_state(state)
}

/// Serves until `shutdown` resolves, then drains in-flight requests.
pub async fn serve_on(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

pub fn serve(args: ServeArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    let verifier = args.model.build()?;
    let state = Arc::new(AppState::from_config(&cfg, verifier)?);
    let addr: SocketAddr = cfg.bind.parse().map_err(|e| CliError::Usage(format!("bind address {:?}: {e}", cfg.bind)))?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start runtime: {e}")))?;
    rt.block_on(async move {
        let listener = TcpListener::bind(addr).await.map_err(|e| CliError::Usage(format!("bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| CliError::Usage(e.to_string()))?;
        tracing::info!(
            addr = %local,
            records = state.manifest.qa.len(),
            config_hash = %state.reward.hash(),
            logic = state.reward.logic_enabled,
            verifier = state.verifier.is_some(),
            "serving"
        );
        serve_on(listener, state, shutdown_signal()).await.map_err(|e| CliError::Usage(format!("server: {e}")))
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    tracing::info!("shutting down");
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, body: json!({ "error": message.into() }) }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

impl From<RewardError> for ApiError {
    fn from(e: RewardError) -> Self {
        match &e {
            RewardError::Verifier(c) => Self {
                status: StatusCode::BAD_GATEWAY,
                body: json!({
                    "error": e.to_string(),
                    "channel": "logic",
                    "failure": c.failure_class(),
                    "attempts": match c {
                        ClientError::Failed { attempts, .. } => Some(*attempts),
                        _ => None,
                    },
                }),
            },
            RewardError::Config(_) | RewardError::NoVerifier | RewardError::EmptyGroup => {
                Self::bad_request(e.to_string())
            }
        }
    }
}

async fn auth(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

/// Runs `f` on the blocking pool under a concurrency permit.
async fn blocking<T, F>(state: &Arc<AppState>, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(Arc<AppState>) -> Result<T, ApiError> + Send + 'static,
{
    let permit = state
        .permits
        .clone()
        .try_acquire_owned()
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "overloaded: concurrency cap reached"))?;
    let st = state.clone();
    tokio::task::spawn_blocking(move || {
        let _permit = permit;
        f(st)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("handler failed: {e}")))?
}

/// Applies `over` onto `base`; keys absent from `base` are rejected.
fn merge_overrides(base: &mut Value, over: &Map<String, Value>, path: &str) -> Result<(), String> {
    let obj = base.as_object_mut().ok_or_else(|| format!("{path} is not an object"))?;
    for (k, v) in over {
        let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match obj.get_mut(k) {
            None => return Err(format!("unknown config key `{key}`")),
            Some(slot) => match (slot.is_object(), v) {
                (true, Value::Object(inner)) => merge_overrides(slot, inner, &key)?,
                _ => *slot = v.clone(),
            },
        }
    }
    Ok(())
}

/// The service's reward config with per-request overrides applied.
pub fn effective_config(base: &RewardConfig, over: Option<&Map<String, Value>>) -> Result<RewardConfig, String> {
    let Some(over) = over.filter(|o| !o.is_empty()) else {
        return Ok(base.clone());
    };
    let mut v = serde_json::to_value(base).map_err(|e| e.to_string())?;
    merge_overrides(&mut v, over, "")?;
    let cfg: RewardConfig = serde_json::from_value(v).map_err(|e| format!("config: {e}"))?;
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn resolve_qa(state: &AppState, qa_id: Option<String>, qa: Option<QaPair>) -> Result<QaPair, ApiError> {
    match (qa_id, qa) {
        (Some(id), None) => state
            .index
            .get(&id)
            .map(|&i| state.manifest.qa[i].clone())
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown qa_id {id}"))),
        (None, Some(q)) => {
            q.check().map_err(|e| ApiError::bad_request(format!("inline qa: {e}")))?;
            Ok(q)
        }
        _ => Err(ApiError::bad_request("pass exactly one of `qa_id` and `qa`")),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardRequest {
    #[serde(default)]
    pub qa_id: Option<String>,
    #[serde(default)]
    pub qa: Option<QaPair>,
    pub response: String,
    /// Partial RewardConfig overrides.
    #[serde(default)]
    pub config: Option<Map<String, Value>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardResponse {
    pub engine_version: String,
    pub config_hash: String,
    pub qa_id: String,
    pub rewards: RewardVector,
    pub defects: Vec<Defect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verifier_error: Option<String>,
}

async fn reward(
    State(state): State<Arc<AppState>>,
    body: Result<Json<RewardRequest>, JsonRejection>,
) -> Result<Json<RewardResponse>, ApiError> {
    let Json(req) = body?;
    let cfg = effective_config(&state.reward, req.config.as_ref()).map_err(ApiError::bad_request)?;
    let qa = resolve_qa(&state, req.qa_id, req.qa)?;
    let out = blocking(&state, move |st| {
        let d = compute_rewards_detailed(&qa, &req.response, st.verifier.as_deref(), &cfg)?;
        Ok(RewardResponse {
            engine_version: ENGINE_VERSION.into(),
            config_hash: cfg.hash(),
            qa_id: qa.qa_id,
            rewards: d.rewards,
            defects: d.defects,
            verifier_error: d.verifier_error,
        })
    })
    .await?;
    Ok(Json(out))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupRequest {
    #[serde(default)]
    pub qa_id: Option<String>,
    #[serde(default)]
    pub qa: Option<QaPair>,
    pub responses: Vec<String>,
    #[serde(default)]
    pub config: Option<Map<String, Value>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupResponse {
    pub engine_version: String,
    pub config_hash: String,
    pub qa_id: String,
    pub rewards: Vec<RewardVector>,
    pub mean: f64,
    pub stdev: f64,
}

async fn reward_group(
    State(state): State<Arc<AppState>>,
    body: Result<Json<GroupRequest>, JsonRejection>,
) -> Result<Json<GroupResponse>, ApiError> {
    let Json(req) = body?;
    let cfg = effective_config(&state.reward, req.config.as_ref()).map_err(ApiError::bad_request)?;
    let qa = resolve_qa(&state, req.qa_id, req.qa)?;
    let out = blocking(&state, move |st| {
        let g = group_rewards(&qa, &req.responses, st.verifier.as_deref(), &cfg)?;
        Ok(GroupResponse {
            engine_version: ENGINE_VERSION.into(),
            config_hash: cfg.hash(),
            qa_id: qa.qa_id,
            rewards: g.rewards,
            mean: g.mean,
            stdev: g.stdev,
        })
    })
    .await?;
    Ok(Json(out))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    pub responses: Vec<ResponseRecord>,
    #[serde(default)]
    pub pairing_mode: Option<PairingMode>,
    #[serde(default)]
    pub expects_location: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub engine_version: String,
    /// Hash of the evaluation config used.
    pub config_hash: String,
    pub report: ScoreReport,
    /// Records that had a response; the rest scored 0.
    pub answered: usize,
    pub records: usize,
}

/// First 16 hex chars of SHA-256 over the config's JSON form.
pub fn eval_config_hash(cfg: &EvalConfig) -> String {
    let text = serde_json::to_string(cfg).expect("config serializes");
    hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string()
}

async fn score(
    State(state): State<Arc<AppState>>,
    body: Result<Json<ScoreRequest>, JsonRejection>,
) -> Result<Json<ScoreResponse>, ApiError> {
    let Json(req) = body?;
    let defaults = EvalConfig::default();
    let cfg = EvalConfig {
        pairing_mode: req.pairing_mode.unwrap_or(defaults.pairing_mode),
        expects_location: req.expects_location.unwrap_or(defaults.expects_location),
    };
    let mut responses = HashMap::with_capacity(req.responses.len());
    for r in req.responses {
        if !state.index.contains_key(&r.qa_id) {
            return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown qa_id {}", r.qa_id)));
        }
        if responses.insert(r.qa_id.clone(), r.response).is_some() {
            return Err(ApiError::bad_request(format!("duplicate response for {}", r.qa_id)));
        }
    }
    let out = blocking(&state, move |st| {
        let (report, per_qa) = evaluate(&st.manifest, &responses, &cfg);
        Ok(ScoreResponse {
            engine_version: ENGINE_VERSION.into(),
            config_hash: eval_config_hash(&cfg),
            report,
            answered: per_qa.iter().filter(|s| s.answered).count(),
            records: per_qa.len(),
        })
    })
    .await?;
    Ok(Json(out))
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "engine_version": ENGINE_VERSION,
        "config_hash": state.reward.hash(),
        "records": state.manifest.qa.len(),
        "logic_enabled": state.reward.logic_enabled,
        "verifier": state.verifier.is_some(),
        "available_permits": state.permits.available_permits(),
    }))
}
