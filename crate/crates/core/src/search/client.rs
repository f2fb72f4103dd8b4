use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ArticleMeta;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited by the bibliographic service")]
    RateLimited,
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("article {0} not found")]
    NotFound(String),
}

impl ClientError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::Transport(_) | Self::RateLimited)
    }
}

/// A bibliographic database: keyword search plus open-access full text.
#[async_trait]
pub trait BibliographicClient: Send + Sync {
    async fn search(&self, query: &str, limit: u32) -> Result<Vec<ArticleMeta>, ClientError>;

    /// Open-access body text, or `None` when the article has none.
    async fn fetch_fulltext(&self, article: &ArticleMeta) -> Result<Option<String>, ClientError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureFailure {
    RateLimited,
    Transport,
    Malformed,
}

/// On-disk fixture shape: parsed search results per query text, full-text
/// bodies per article id, and scripted failures per query.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureSet {
    pub searches: BTreeMap<String, Vec<ArticleMeta>>,
    pub fulltext: BTreeMap<String, String>,
    pub failures: BTreeMap<String, FixtureFailure>,
}

/// Replays a [`FixtureSet`]. Unknown queries return no results.
#[derive(Debug, Default)]
pub struct FixtureClient {
    fixtures: FixtureSet,
    search_calls: AtomicUsize,
    fetch_calls: AtomicUsize,
}

impl FixtureClient {
    pub fn new(fixtures: FixtureSet) -> Self {
        Self {
            fixtures,
            ..Self::default()
        }
    }

    pub fn from_json_file(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let fixtures = serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        Ok(Self::new(fixtures))
    }

    pub fn search_calls(&self) -> usize {
        self.search_calls.load(Ordering::SeqCst)
    }

    pub fn fetch_calls(&self) -> usize {
        self.fetch_calls.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl BibliographicClient for FixtureClient {
    async fn search(&self, query: &str, limit: u32) -> Result<Vec<ArticleMeta>, ClientError> {
        self.search_calls.fetch_add(1, Ordering::SeqCst);
        match self.fixtures.failures.get(query) {
            Some(FixtureFailure::RateLimited) => return Err(ClientError::RateLimited),
            Some(FixtureFailure::Transport) => return Err(ClientError::Transport("scripted".into())),
            Some(FixtureFailure::Malformed) => return Err(ClientError::Malformed("scripted".into())),
            None => {}
        }
        Ok(self
            .fixtures
            .searches
            .get(query)
            .map(|v| v.iter().take(limit as usize).cloned().collect())
            .unwrap_or_default())
    }

    async fn fetch_fulltext(&self, article: &ArticleMeta) -> Result<Option<String>, ClientError> {
        self.fetch_calls.fetch_add(1, Ordering::SeqCst);
        Ok(self.fixtures.fulltext.get(&article.article_id).cloned())
    }
}
