//! Blocking client for OpenAI-compatible chat-completion servers.

use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{
    check_prompt_cap, ChatModel, ChatRequest, ChatResponse, ClientConfig, ClientError,
    FailureClass, InFlightLimiter, Role,
};

const MAX_BACKOFF: Duration = Duration::from_secs(5);

pub struct HttpClient {
    config: ClientConfig,
    http: reqwest::blocking::Client,
    limiter: InFlightLimiter,
}

struct Attempt {
    class: FailureClass,
    message: String,
    retryable: bool,
}

impl HttpClient {
    pub fn new(config: ClientConfig) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| ClientError::InvalidRequest(format!("cannot build HTTP client: {e}")))?;
        let limiter = InFlightLimiter::new(config.max_in_flight);
        Ok(Self { config, http, limiter })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    fn body(&self, req: &ChatRequest) -> Value {
        let last_user = req.messages.iter().rposition(|m| m.role == Role::User);
        let messages: Vec<Value> = req
            .messages
            .iter()
            .enumerate()
            .map(|(i, m)| {
                if Some(i) == last_user && !req.images.is_empty() {
                    let mut parts: Vec<Value> = req
                        .images
                        .iter()
                        .map(|url| json!({"type": "image_url", "image_url": {"url": url}}))
                        .collect();
                    parts.push(json!({"type": "text", "text": m.content}));
                    json!({"role": m.role, "content": parts})
                } else {
                    json!({"role": m.role, "content": m.content})
                }
            })
            .collect();
        json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": req.decoding.temperature,
            "max_tokens": req.decoding.max_tokens,
            "stream": false,
        })
    }

    fn attempt(&self, req: &ChatRequest, body: &Value) -> Result<String, Attempt> {
        let timeout = req.timeout().min(Duration::from_secs_f64(self.config.timeout_secs));
        let mut call = self.http.post(self.config.completions_url()).timeout(timeout).json(body);
        if let Some(key) = &self.config.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call.send().map_err(|e| {
            let class = if e.is_timeout() {
                FailureClass::Timeout
            } else if e.is_connect() {
                FailureClass::Unreachable
            } else {
                FailureClass::Protocol
            };
            Attempt { class, message: e.to_string(), retryable: class != FailureClass::Protocol }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Attempt {
            class: if e.is_timeout() { FailureClass::Timeout } else { FailureClass::Protocol },
            message: e.to_string(),
            retryable: e.is_timeout(),
        })?;
        if !status.is_success() {
            return Err(Attempt {
                class: FailureClass::Remote,
                message: format!("HTTP {status}: {}", text.chars().take(200).collect::<String>()),
                retryable: status.is_server_error() || status.as_u16() == 429,
            });
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| Attempt {
            class: FailureClass::Protocol,
            message: format!("response is not JSON: {e}"),
            retryable: false,
        })?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or(Attempt {
                class: FailureClass::Protocol,
                message: "missing choices[0].message.content".into(),
                retryable: false,
            })
    }
}

impl ChatModel for HttpClient {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ClientError> {
        req.validate()?;
        check_prompt_cap(req, self.config.prompt_token_cap)?;
        let body = self.body(req);
        let _permit = self.limiter.acquire();
        let start = Instant::now();
        let max_attempts = self.config.max_retries + 1;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(req, &body) {
                Ok(text) => {
                    return Ok(ChatResponse { text, latency_secs: start.elapsed().as_secs_f64(), attempts })
                }
                Err(a) if a.retryable && attempts < max_attempts => {
                    let backoff = Duration::from_millis(self.config.backoff_ms)
                        .saturating_mul(1 << (attempts - 1).min(16))
                        .min(MAX_BACKOFF);
                    tracing::debug!(attempt = attempts, class = %a.class, "retrying model call: {}", a.message);
                    std::thread::sleep(backoff);
                }
                Err(a) => {
                    return Err(ClientError::Failed { class: a.class, attempts, message: a.message })
                }
            }
        }
    }
}
