use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use async_trait::async_trait;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::cache::sha256_hex;
use crate::net::RetryPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub model: String,
    pub temperature: f64,
}

impl ChatRequest {
    /// SHA-256 over all four inputs; the mock fixture key.
    pub fn fixture_key(&self) -> String {
        sha256_hex(
            serde_json::to_string(&(&self.system, &self.user, &self.model, self.temperature))
                .unwrap()
                .as_bytes(),
        )
    }

    /// Fixture key with the temperature left out.
    pub fn fixture_key_ignoring_temperature(&self) -> String {
        sha256_hex(
            serde_json::to_string(&(&self.system, &self.user, &self.model))
                .unwrap()
                .as_bytes(),
        )
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited by the chat backend")]
    RateLimited,
    #[error("chat backend returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed chat response: {0}")]
    Malformed(String),
    #[error("no mock completion for request {0}")]
    MissingFixture(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            Self::Transport(_) | Self::RateLimited => true,
            Self::Http { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    async fn complete(&self, req: &ChatRequest) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    pub contains: String,
    pub completion: String,
}

/// Mock fixture file. Lookup order: exact input hash, then the first rule
/// whose `contains` text occurs in the user message, then `default`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockFixtures {
    pub completions: BTreeMap<String, String>,
    pub rules: Vec<MockRule>,
    pub default: Option<String>,
}

/// Deterministic replay backend, safe under concurrent lookup.
#[derive(Debug, Default)]
pub struct MockChatBackend {
    fixtures: MockFixtures,
    ignore_temperature: bool,
    calls: AtomicUsize,
}

impl MockChatBackend {
    pub fn new(fixtures: MockFixtures) -> Self {
        Self {
            fixtures,
            ..Self::default()
        }
    }

    /// Hash keys omit the temperature, so every temperature sees the same
    /// completion.
    pub fn ignoring_temperature(mut self) -> Self {
        self.ignore_temperature = true;
        self
    }

    /// Accepts either the full fixture object or a bare `{hash: completion}` map.
    pub fn from_json_str(text: &str) -> serde_json::Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let full = value
            .as_object()
            .is_some_and(|o| ["completions", "rules", "default"].iter().any(|k| o.contains_key(*k)));
        let fixtures = if full {
            serde_json::from_value(value)?
        } else {
            MockFixtures {
                completions: serde_json::from_value(value)?,
                ..MockFixtures::default()
            }
        };
        Ok(Self::new(fixtures))
    }

    pub fn from_json_file(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn key_for(&self, req: &ChatRequest) -> String {
        if self.ignore_temperature {
            req.fixture_key_ignoring_temperature()
        } else {
            req.fixture_key()
        }
    }

    pub fn insert(&mut self, req: &ChatRequest, completion: impl Into<String>) {
        let key = self.key_for(req);
        self.fixtures.completions.insert(key, completion.into());
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl ChatBackend for MockChatBackend {
    async fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let key = self.key_for(req);
        if let Some(c) = self.fixtures.completions.get(&key) {
            return Ok(c.clone());
        }
        if let Some(rule) = self.fixtures.rules.iter().find(|r| req.user.contains(&r.contains)) {
            return Ok(rule.completion.clone());
        }
        self.fixtures
            .default
            .clone()
            .ok_or(BackendError::MissingFixture(key))
    }
}

/// Returns scripted responses in order and records every request.
#[derive(Debug, Default)]
pub struct ScriptedChatBackend {
    script: Mutex<VecDeque<Result<String, BackendError>>>,
    requests: Mutex<Vec<ChatRequest>>,
}

impl ScriptedChatBackend {
    pub fn new<I, S>(completions: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::with_results(completions.into_iter().map(|c| Ok(c.into())))
    }

    pub fn with_results(results: impl IntoIterator<Item = Result<String, BackendError>>) -> Self {
        Self {
            script: Mutex::new(results.into_iter().collect()),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> usize {
        self.requests.lock().unwrap().len()
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().unwrap().clone()
    }
}

#[async_trait]
impl ChatBackend for ScriptedChatBackend {
    async fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        self.requests.lock().unwrap().push(req.clone());
        self.script
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| Err(BackendError::MissingFixture("script exhausted".into())))
    }
}

pub const DEFAULT_LLM_BASE_URL: &str = "https://api.openai.com/v1";

/// OpenAI-compatible `/chat/completions` client.
pub struct OpenAiChatBackend {
    http: reqwest::Client,
    base_url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
}

impl OpenAiChatBackend {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            http: reqwest::Client::new(),
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.filter(|k| !k.is_empty()),
            retry: RetryPolicy::default(),
        }
    }

    /// Reads `LLM_BASE_URL` and `LLM_API_KEY`.
    pub fn from_env() -> Self {
        Self::new(
            std::env::var("LLM_BASE_URL").unwrap_or_else(|_| DEFAULT_LLM_BASE_URL.to_string()),
            std::env::var("LLM_API_KEY").ok(),
        )
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    async fn once(&self, body: &Value) -> Result<String, BackendError> {
        let mut req = self
            .http
            .post(format!("{}/chat/completions", self.base_url))
            .json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().await.map_err(|e| BackendError::Transport(e.to_string()))?;
        if status == StatusCode::TOO_MANY_REQUESTS {
            return Err(BackendError::RateLimited);
        }
        if !status.is_success() {
            return Err(BackendError::Http {
                status: status.as_u16(),
                body: text,
            });
        }
        parse_chat_completion(&text)
    }
}

pub fn parse_chat_completion(body: &str) -> Result<String, BackendError> {
    let v: Value = serde_json::from_str(body).map_err(|e| BackendError::Malformed(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| BackendError::Malformed("missing choices[0].message.content".into()))
}

#[async_trait]
impl ChatBackend for OpenAiChatBackend {
    async fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let body = json!({
            "model": req.model,
            "temperature": req.temperature,
            "messages": [
                {"role": "system", "content": req.system},
                {"role": "user", "content": req.user},
            ],
        });
        self.retry.run(BackendError::is_retryable, || self.once(&body)).await
    }
}
