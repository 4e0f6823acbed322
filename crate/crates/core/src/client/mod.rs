//! Uniform interface to external chat/vision models.
//!
//! Every component that needs a model (captioner, CoT reasoner, summarizer,
//! generator, validator, logic verifier) takes a `&dyn ChatModel`. Two
//! implementations ship with the crate: [`HttpClient`] for OpenAI-compatible
//! chat-completion servers and [`ScriptedClient`] for offline runs.

mod config;
mod http;
mod scripted;

pub use config::{ClientConfig, ConfigError};
pub use http::HttpClient;
pub use scripted::{ScriptReply, ScriptRule, ScriptedClient, Matcher};

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::sync::LazyLock;
use thiserror::Error;

/// Default prompt cap, in heuristic tokens.
pub const DEFAULT_PROMPT_TOKEN_CAP: usize = 4096;
/// Default output cap, in tokens.
pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for Decoding {
    /// Greedy decoding with the default output cap.
    fn default() -> Self {
        Self { temperature: 0.0, max_tokens: DEFAULT_MAX_OUTPUT_TOKENS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    #[serde(default)]
    pub images: Vec<String>,
    #[serde(default)]
    pub decoding: Decoding,
    pub timeout_secs: f64,
}

impl ChatRequest {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            messages: vec![Message { role: Role::User, content: text.into() }],
            images: Vec::new(),
            decoding: Decoding::default(),
            timeout_secs: 60.0,
        }
    }

    pub fn with_image(mut self, image: impl Into<String>) -> Self {
        self.images.push(image.into());
        self
    }

    pub fn with_decoding(mut self, decoding: Decoding) -> Self {
        self.decoding = decoding;
        self
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.messages.is_empty() {
            return Err(ClientError::InvalidRequest("request has no messages".into()));
        }
        if self.decoding.max_tokens < 1 {
            return Err(ClientError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(ClientError::InvalidRequest("timeout must be positive".into()));
        }
        Ok(())
    }

    /// All message contents joined by blank lines.
    pub fn prompt_text(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n\n")
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    /// SHA-256 over messages and images; decoding and timeout are excluded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for m in &self.messages {
            h.update(serde_json::to_string(&m.role).unwrap_or_default().as_bytes());
            h.update([0u8]);
            h.update(m.content.as_bytes());
            h.update([0u8]);
        }
        for img in &self.images {
            h.update(img.as_bytes());
            h.update([1u8]);
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub latency_secs: f64,
    pub attempts: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureClass {
    Timeout,
    Unreachable,
    Protocol,
    Remote,
}

impl std::fmt::Display for FailureClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Timeout => "timeout",
            Self::Unreachable => "unreachable",
            Self::Protocol => "protocol",
            Self::Remote => "remote",
        })
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ClientError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("prompt has ~{tokens} tokens, over the cap of {cap}")]
    PromptTooLong { tokens: usize, cap: usize },
    #[error("{class} failure after {attempts} attempt(s): {message}")]
    Failed { class: FailureClass, attempts: u32, message: String },
    #[error("scripted client has no reply for request {fingerprint}")]
    NoScriptedReply { fingerprint: String },
}

impl ClientError {
    pub fn failure_class(&self) -> Option<FailureClass> {
        match self {
            Self::Failed { class, .. } => Some(*class),
            _ => None,
        }
    }
}

pub trait ChatModel: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ClientError>;
}

impl<T: ChatModel + ?Sized> ChatModel for &T {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ClientError> {
        (**self).complete(req)
    }
}

impl<T: ChatModel + ?Sized> ChatModel for std::sync::Arc<T> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ClientError> {
        (**self).complete(req)
    }
}

static TOKEN_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\w+|[^\w\s]").unwrap());

/// Approximate token count: one per word run and one per punctuation mark.
pub fn estimate_tokens(text: &str) -> usize {
    TOKEN_RE.find_iter(text).count()
}

pub fn check_prompt_cap(req: &ChatRequest, cap: usize) -> Result<(), ClientError> {
    let tokens = estimate_tokens(&req.prompt_text());
    if tokens > cap {
        return Err(ClientError::PromptTooLong { tokens, cap });
    }
    Ok(())
}

/// Counting semaphore bounding concurrent in-flight requests.
#[derive(Debug)]
pub struct InFlightLimiter {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

impl InFlightLimiter {
    pub fn new(limit: usize) -> Self {
        Self { limit: limit.max(1), active: Mutex::new(0), freed: Condvar::new() }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn acquire(&self) -> InFlightPermit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        InFlightPermit { limiter: self }
    }

    pub fn active(&self) -> usize {
        *self.active.lock().unwrap_or_else(|e| e.into_inner())
    }
}

pub struct InFlightPermit<'a> {
    limiter: &'a InFlightLimiter,
}

impl Drop for InFlightPermit<'_> {
    fn drop(&mut self) {
        let mut active = self.limiter.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.limiter.freed.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn token_heuristic_counts_words_and_punctuation() {
        assert_eq!(estimate_tokens("Hello, world!"), 4);
        assert_eq!(estimate_tokens("  "), 0);
        assert_eq!(estimate_tokens("[10, 20]"), 5);
    }

    #[test]
    fn request_validation() {
        let mut r = ChatRequest::user("hi");
        assert!(r.validate().is_ok());
        r.decoding.max_tokens = 0;
        assert!(r.validate().is_err());
        let mut empty = ChatRequest::user("x");
        empty.messages.clear();
        assert!(empty.validate().is_err());
    }

    #[test]
    fn fingerprint_ignores_decoding() {
        let a = ChatRequest::user("same");
        let b = ChatRequest::user("same").with_decoding(Decoding { temperature: 0.7, max_tokens: 9 });
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), ChatRequest::user("other").fingerprint());
        assert_ne!(a.fingerprint(), a.clone().with_image("img.jpg").fingerprint());
    }

    #[test]
    fn limiter_bounds_concurrency() {
        let limiter = Arc::new(InFlightLimiter::new(2));
        let peak = Arc::new(AtomicUsize::new(0));
        std::thread::scope(|s| {
            for _ in 0..8 {
                let limiter = limiter.clone();
                let peak = peak.clone();
                s.spawn(move || {
                    let _p = limiter.acquire();
                    peak.fetch_max(limiter.active(), Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
        assert_eq!(limiter.active(), 0);
    }
}
