use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use async_trait::async_trait;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::net::RetryPolicy;

pub const DEFAULT_PROVIDER_IDS: [&str; 3] = ["all-mpnet-base-v2", "all-MiniLM-L6-v2", "sentence-t5-base"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("embedding service returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed embedding response: {0}")]
    Malformed(String),
    #[error("provider dimension changed from {expected} to {got}")]
    DimensionChanged { expected: usize, got: usize },
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        match self {
            Self::Transport(_) => true,
            Self::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// A sentence-embedding model.
#[async_trait]
pub trait EmbeddingProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    async fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError>;
}

/// Deterministic stand-in for a sentence transformer: signed feature hashing
/// of lower-cased word tokens, seeded per provider, plus one constant
/// component so no text maps to the zero vector.
#[derive(Debug)]
pub struct HashingEmbedder {
    provider_id: String,
    dimension: usize,
    seed: u64,
    calls: AtomicUsize,
}

impl HashingEmbedder {
    pub fn new(provider_id: impl Into<String>, dimension: usize, seed: u64) -> Self {
        assert!(dimension >= 2, "need room for the bias component");
        Self {
            provider_id: provider_id.into(),
            dimension,
            seed,
            calls: AtomicUsize::new(0),
        }
    }

    /// One fake per default provider id, 64-dimensional.
    pub fn defaults(seed: u64) -> Vec<HashingEmbedder> {
        DEFAULT_PROVIDER_IDS
            .iter()
            .map(|id| HashingEmbedder::new(*id, 64, seed))
            .collect()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn embed_sync(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        let buckets = (self.dimension - 1) as u64;
        for token in text
            .split(|c: char| !c.is_alphanumeric() && c != '%' && c != '.')
            .map(|t| t.trim_matches('.').to_lowercase())
            .filter(|t| !t.is_empty())
        {
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update(self.provider_id.as_bytes());
            h.update([0u8]);
            h.update(token.as_bytes());
            let d = h.finalize();
            let idx = u64::from_le_bytes(d[..8].try_into().unwrap()) % buckets;
            let sign = if d[8] & 1 == 0 { 1.0 } else { -1.0 };
            v[idx as usize] += sign;
        }
        v[self.dimension - 1] = 1.0;
        v
    }
}

#[async_trait]
impl EmbeddingProvider for HashingEmbedder {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }

    async fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(self.embed_sync(text))
    }
}

/// `POST {base}/{provider_id}` with `{"text": ...}`, answered by `{"vector": [...]}`.
pub struct HttpEmbedder {
    http: reqwest::Client,
    base_url: String,
    provider_id: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    dimension: OnceLock<usize>,
}

impl HttpEmbedder {
    pub fn new(base_url: impl Into<String>, provider_id: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            http: reqwest::Client::new(),
            base_url: base_url.into().trim_end_matches('/').to_string(),
            provider_id: provider_id.into(),
            api_key: api_key.filter(|k| !k.is_empty()),
            retry: RetryPolicy::default(),
            dimension: OnceLock::new(),
        }
    }

    /// Reads `EMBED_BASE_URL` and `EMBED_API_KEY`; `None` when no base URL is set.
    pub fn from_env(provider_id: &str) -> Option<Self> {
        let base = std::env::var("EMBED_BASE_URL").ok()?;
        Some(Self::new(base, provider_id, std::env::var("EMBED_API_KEY").ok()))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    async fn once(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        let mut req = self
            .http
            .post(format!("{}/{}", self.base_url, self.provider_id))
            .json(&json!({ "text": text }));
        if let Some(k) = &self.api_key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().await.map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = resp.status();
        let body = resp.text().await.map_err(|e| ProviderError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(ProviderError::Http {
                status: status.as_u16(),
                body,
            });
        }
        let v: Value = serde_json::from_str(&body).map_err(|e| ProviderError::Malformed(e.to_string()))?;
        let vector: Vec<f64> = v
            .get("vector")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::Malformed("missing vector".into()))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| ProviderError::Malformed("non-numeric component".into())))
            .collect::<Result<_, _>>()?;
        let expected = *self.dimension.get_or_init(|| vector.len());
        if expected != vector.len() {
            return Err(ProviderError::DimensionChanged {
                expected,
                got: vector.len(),
            });
        }
        Ok(vector)
    }
}

#[async_trait]
impl EmbeddingProvider for HttpEmbedder {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }

    async fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        self.retry.run(ProviderError::is_retryable, || self.once(text)).await
    }
}
