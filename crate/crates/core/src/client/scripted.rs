//! Offline client that answers from a script.
//!
//! Rules are tried in order; the first whose matcher accepts the request
//! answers it. A rule with several replies hands them out in sequence and then
//! keeps repeating the last one. Every request is recorded in a transcript.

use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{
    check_prompt_cap, ChatModel, ChatRequest, ChatResponse, ClientError, FailureClass,
    DEFAULT_PROMPT_TOKEN_CAP,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    /// Exact [`ChatRequest::fingerprint`].
    Fingerprint(String),
    /// Substring of the joined prompt text.
    Contains(String),
    /// Every listed substring must occur.
    ContainsAll(Vec<String>),
    Any,
}

impl Matcher {
    fn accepts(&self, req: &ChatRequest, prompt: &str) -> bool {
        match self {
            Matcher::Fingerprint(fp) => req.fingerprint() == *fp,
            Matcher::Contains(s) => prompt.contains(s.as_str()),
            Matcher::ContainsAll(all) => all.iter().all(|s| prompt.contains(s.as_str())),
            Matcher::Any => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptReply {
    Text(String),
    Fail { fail: FailureClass },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(rename = "match")]
    pub matcher: Matcher,
    pub replies: Vec<ScriptReply>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct ScriptFile {
    #[serde(default)]
    rules: Vec<ScriptRule>,
    #[serde(default)]
    prompt_token_cap: Option<usize>,
}

#[derive(Debug)]
pub struct ScriptedClient {
    rules: Vec<ScriptRule>,
    served: Mutex<Vec<usize>>,
    transcript: Mutex<Vec<ChatRequest>>,
    prompt_token_cap: usize,
}

impl ScriptedClient {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        let n = rules.len();
        Self {
            rules,
            served: Mutex::new(vec![0; n]),
            transcript: Mutex::new(Vec::new()),
            prompt_token_cap: DEFAULT_PROMPT_TOKEN_CAP,
        }
    }

    /// Answers every request with `text`.
    pub fn constant(text: impl Into<String>) -> Self {
        Self::new(vec![ScriptRule { matcher: Matcher::Any, replies: vec![ScriptReply::Text(text.into())] }])
    }

    pub fn with_prompt_cap(mut self, cap: usize) -> Self {
        self.prompt_token_cap = cap;
        self
    }

    /// Adds a rule that is tried after all existing ones.
    pub fn rule(mut self, matcher: Matcher, replies: Vec<ScriptReply>) -> Self {
        self.rules.push(ScriptRule { matcher, replies });
        self.served.get_mut().unwrap_or_else(|e| e.into_inner()).push(0);
        self
    }

    pub fn on(self, needle: &str, reply: &str) -> Self {
        self.rule(Matcher::Contains(needle.to_string()), vec![ScriptReply::Text(reply.to_string())])
    }

    /// Catch-all reply, tried after every earlier rule.
    pub fn fallback(self, reply: &str) -> Self {
        self.rule(Matcher::Any, vec![ScriptReply::Text(reply.to_string())])
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let file: ScriptFile = serde_json::from_str(text)?;
        let mut client = Self::new(file.rules);
        if let Some(cap) = file.prompt_token_cap {
            client.prompt_token_cap = cap;
        }
        Ok(client)
    }

    pub fn from_path(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn transcript(&self) -> Vec<ChatRequest> {
        self.transcript.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn calls(&self) -> usize {
        self.transcript.lock().unwrap_or_else(|e| e.into_inner()).len()
    }
}

impl ChatModel for ScriptedClient {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ClientError> {
        req.validate()?;
        check_prompt_cap(req, self.prompt_token_cap)?;
        self.transcript.lock().unwrap_or_else(|e| e.into_inner()).push(req.clone());
        let prompt = req.prompt_text();
        let Some(idx) = self.rules.iter().position(|r| r.matcher.accepts(req, &prompt)) else {
            return Err(ClientError::NoScriptedReply { fingerprint: req.fingerprint() });
        };
        let rule = &self.rules[idx];
        let n = {
            let mut served = self.served.lock().unwrap_or_else(|e| e.into_inner());
            let n = served[idx];
            served[idx] += 1;
            n
        };
        let Some(reply) = rule.replies.get(n.min(rule.replies.len().saturating_sub(1))) else {
            return Err(ClientError::NoScriptedReply { fingerprint: req.fingerprint() });
        };
        match reply {
            ScriptReply::Text(text) => Ok(ChatResponse { text: text.clone(), latency_secs: 0.0, attempts: 1 }),
            ScriptReply::Fail { fail } => Err(ClientError::Failed {
                class: *fail,
                attempts: 1,
                message: "scripted failure".into(),
            }),
        }
    }
}
