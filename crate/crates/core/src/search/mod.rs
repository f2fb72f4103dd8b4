//! Strain-specific literature search.
//!
//! A [`StrainQuery`] is expanded into several keyword-augmented queries, each
//! query is run against a [`BibliographicClient`], the union of results is
//! scored lexically over title and abstract, and the articles that reach the
//! threshold are ranked and their full text fetched.

mod client;
pub mod eutils;
mod history;

use std::collections::BTreeMap;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::KvStore;
use crate::domain::StrainQuery;

pub use client::{BibliographicClient, ClientError, FixtureClient, FixtureFailure, FixtureSet};
pub use history::{FetchStatus, PaperLog, PaperStatus, QueryLog, SearchHistory};

pub const DEFAULT_KEYWORDS: [&str; 7] = [
    "growth",
    "cultivation",
    "medium",
    "temperature",
    "ph",
    "oxygen",
    "fermentation",
];

pub const DEFAULT_TEMPLATES: [&str; 3] = [
    "growth conditions",
    "medium composition",
    "temperature pH oxygen",
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KeywordError {
    #[error("keyword set must not be empty")]
    Empty,
    #[error("keyword '{0}' is blank")]
    Blank(String),
}

/// Ordered, duplicate-free, lowercase keyword list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct KeywordSet(Vec<String>);

impl KeywordSet {
    /// Lowercases and drops repeated entries, keeping first occurrences.
    pub fn new<I, S>(keywords: I) -> Result<Self, KeywordError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut out: Vec<String> = Vec::new();
        for k in keywords {
            let k = k.as_ref().split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
            if k.is_empty() {
                return Err(KeywordError::Blank(k));
            }
            if !out.contains(&k) {
                out.push(k);
            }
        }
        if out.is_empty() {
            return Err(KeywordError::Empty);
        }
        Ok(Self(out))
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }

    pub fn contains(&self, kw: &str) -> bool {
        self.0.iter().any(|k| k == kw)
    }
}

impl Default for KeywordSet {
    fn default() -> Self {
        Self(DEFAULT_KEYWORDS.iter().map(|s| s.to_string()).collect())
    }
}

impl TryFrom<Vec<String>> for KeywordSet {
    type Error = KeywordError;
    fn try_from(v: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<KeywordSet> for Vec<String> {
    fn from(k: KeywordSet) -> Self {
        k.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpandedQuery {
    pub text: String,
    pub source_keywords: Vec<String>,
}

/// Bibliographic metadata for one article.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArticleMeta {
    pub article_id: String,
    pub title: String,
    #[serde(default)]
    pub r#abstract: Option<String>,
    #[serde(default)]
    pub full_text_available: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelevanceScore {
    pub value: u32,
    pub strain_hits: u32,
    pub keyword_hits: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub keywords: KeywordSet,
    pub templates: Vec<String>,
    /// Articles scoring below this are dropped.
    pub threshold: u32,
    /// Results requested per expanded query.
    pub per_query_limit: u32,
    pub title_weight: u32,
    pub abstract_weight: u32,
    /// Concurrent client requests.
    pub max_in_flight: usize,
    /// Fetch full text for ranked articles as part of the search.
    pub fetch_fulltext: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            keywords: KeywordSet::default(),
            templates: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
            threshold: 3,
            per_query_limit: 20,
            title_weight: 2,
            abstract_weight: 1,
            max_in_flight: 3,
            fetch_fulltext: true,
        }
    }
}

/// Builds the expanded queries: the bare strain, the strain with each single
/// keyword, then the strain with each phrase template. Duplicates are dropped.
pub fn expand_queries(q: &StrainQuery, keywords: &KeywordSet, templates: &[String]) -> Vec<ExpandedQuery> {
    let base = q.display_form();
    let mut out: Vec<ExpandedQuery> = Vec::new();
    let mut push = |text: String, source_keywords: Vec<String>| {
        if !out.iter().any(|e| e.text.eq_ignore_ascii_case(&text)) {
            out.push(ExpandedQuery { text, source_keywords });
        }
    };
    push(base.clone(), Vec::new());
    for kw in keywords.as_slice() {
        push(format!("{base} {kw}"), vec![kw.clone()]);
    }
    for template in templates {
        let template = template.split_whitespace().collect::<Vec<_>>().join(" ");
        if template.is_empty() {
            continue;
        }
        let lower = template.to_lowercase();
        let sources: Vec<String> = keywords
            .as_slice()
            .iter()
            .filter(|kw| count_occurrences(&lower, kw) > 0)
            .cloned()
            .collect();
        push(format!("{base} {template}"), sources);
    }
    out
}

/// Lowercases and collapses whitespace so phrase matching is layout-insensitive.
fn normalize(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Non-overlapping whole-word spans of `needle` in `hay`; both already normalised.
fn find_spans(hay: &str, needle: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    if needle.is_empty() {
        return spans;
    }
    let mut from = 0;
    while let Some(off) = hay[from..].find(needle) {
        let start = from + off;
        let end = start + needle.len();
        let before_ok = hay[..start].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
        let after_ok = hay[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
        if before_ok && after_ok {
            spans.push((start, end));
            from = end;
        } else {
            from = start + hay[start..].chars().next().map_or(1, char::len_utf8);
        }
    }
    spans
}

fn count_occurrences(hay: &str, needle: &str) -> u32 {
    find_spans(hay, needle).len() as u32
}

/// Strain mentions in one normalised location. Full display-form matches are
/// counted first; bare "genus species" mentions outside those spans are added.
fn strain_occurrences(hay: &str, q: &StrainQuery) -> u32 {
    let display = normalize(&q.display_form());
    let binomial = normalize(&q.binomial());
    let specific = find_spans(hay, &display);
    if display == binomial {
        return specific.len() as u32;
    }
    let fallback = find_spans(hay, &binomial)
        .into_iter()
        .filter(|(s, e)| !specific.iter().any(|(ss, se)| s < se && ss < e))
        .count();
    (specific.len() + fallback) as u32
}

pub fn score_relevance(a: &ArticleMeta, q: &StrainQuery, keywords: &KeywordSet) -> RelevanceScore {
    score_weighted(a, q, keywords, 2, 1)
}

pub fn score_weighted(
    a: &ArticleMeta,
    q: &StrainQuery,
    keywords: &KeywordSet,
    title_weight: u32,
    abstract_weight: u32,
) -> RelevanceScore {
    let title = normalize(&a.title);
    let abs = normalize(a.r#abstract.as_deref().unwrap_or(""));
    let strain_title = strain_occurrences(&title, q);
    let strain_abs = strain_occurrences(&abs, q);
    let mut value = title_weight * strain_title + abstract_weight * strain_abs;
    let mut keyword_hits = 0;
    for kw in keywords.as_slice() {
        let t = count_occurrences(&title, kw);
        let b = count_occurrences(&abs, kw);
        keyword_hits += t + b;
        value += title_weight * t + abstract_weight * b;
    }
    RelevanceScore {
        value,
        strain_hits: strain_title + strain_abs,
        keyword_hits,
    }
}

/// Runs one expanded query, truncating to `limit` and dropping repeated ids.
pub async fn search_articles(
    eq: &ExpandedQuery,
    limit: u32,
    client: &dyn BibliographicClient,
) -> Result<Vec<ArticleMeta>, ClientError> {
    let limit = limit.max(1);
    let raw = client.search(&eq.text, limit).await?;
    let mut seen = std::collections::HashSet::new();
    Ok(raw
        .into_iter()
        .filter(|a| !a.article_id.is_empty() && seen.insert(a.article_id.clone()))
        .take(limit as usize)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredArticle {
    pub meta: ArticleMeta,
    pub score: RelevanceScore,
}

/// Union of per-query results keyed by article id, keeping the best score.
pub fn merge_results<'a>(
    batches: impl IntoIterator<Item = &'a [ArticleMeta]>,
    q: &StrainQuery,
    cfg: &SearchConfig,
) -> Vec<ScoredArticle> {
    let mut best: BTreeMap<String, ScoredArticle> = BTreeMap::new();
    for batch in batches {
        for meta in batch {
            let score = score_weighted(meta, q, &cfg.keywords, cfg.title_weight, cfg.abstract_weight);
            match best.get(&meta.article_id) {
                Some(existing) if existing.score.value >= score.value => {}
                _ => {
                    best.insert(
                        meta.article_id.clone(),
                        ScoredArticle {
                            meta: meta.clone(),
                            score,
                        },
                    );
                }
            }
        }
    }
    best.into_values().collect()
}

/// Sorts by score descending then id ascending, filters by threshold, truncates.
pub fn rank(mut scored: Vec<ScoredArticle>, threshold: u32, max_papers: usize) -> Vec<ScoredArticle> {
    scored.retain(|a| a.score.value >= threshold);
    scored.sort_by(|a, b| {
        b.score
            .value
            .cmp(&a.score.value)
            .then_with(|| a.meta.article_id.cmp(&b.meta.article_id))
    });
    scored.truncate(max_papers);
    scored
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FetchedText {
    FullText { article_id: String, body: String },
    AbstractOnly { article_id: String, r#abstract: String },
}

impl FetchedText {
    pub fn article_id(&self) -> &str {
        match self {
            Self::FullText { article_id, .. } | Self::AbstractOnly { article_id, .. } => article_id,
        }
    }

    pub fn text(&self) -> &str {
        match self {
            Self::FullText { body, .. } => body,
            Self::AbstractOnly { r#abstract, .. } => r#abstract,
        }
    }

    pub fn is_full_text(&self) -> bool {
        matches!(self, Self::FullText { .. })
    }
}

const FULLTEXT_NS: &str = "article_fulltext";
const META_NS: &str = "article_meta";

/// Full text from the open-access subset when available, else the abstract.
/// Results are cached by article id.
pub async fn fetch_fulltext(
    a: &ArticleMeta,
    client: &dyn BibliographicClient,
    cache: &dyn KvStore,
) -> Result<FetchedText, ClientError> {
    if let Some(bytes) = cache.get(FULLTEXT_NS, &a.article_id).ok().flatten() {
        if let Ok(hit) = serde_json::from_slice::<FetchedText>(&bytes) {
            return Ok(hit);
        }
    }
    let body = if a.full_text_available {
        client.fetch_fulltext(a).await?
    } else {
        None
    };
    let fetched = match body.filter(|b| !b.trim().is_empty()) {
        Some(body) => FetchedText::FullText {
            article_id: a.article_id.clone(),
            body,
        },
        None => match a.r#abstract.as_deref().filter(|s| !s.trim().is_empty()) {
            Some(abs) => FetchedText::AbstractOnly {
                article_id: a.article_id.clone(),
                r#abstract: abs.to_string(),
            },
            None => return Err(ClientError::NotFound(a.article_id.clone())),
        },
    };
    if let Ok(bytes) = serde_json::to_vec(&fetched) {
        if let Err(e) = cache.put(FULLTEXT_NS, &a.article_id, &bytes) {
            tracing::warn!(article_id = %a.article_id, error = %e, "full-text cache write failed");
        }
    }
    Ok(fetched)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedArticle {
    pub meta: ArticleMeta,
    pub score: RelevanceScore,
    /// Populated when full-text fetching is enabled and succeeded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<FetchedText>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedArticles {
    pub articles: Vec<RankedArticle>,
    pub history: SearchHistory,
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("every expanded query failed; last error: {last}")]
    AllQueriesFailed { last: ClientError, history: SearchHistory },
}

/// Expand, search, score, rank and (optionally) fetch.
///
/// Individual query failures are logged and skipped; the call fails only when
/// every query fails.
pub async fn run_search(
    q: &StrainQuery,
    cfg: &SearchConfig,
    client: &dyn BibliographicClient,
    cache: &dyn KvStore,
) -> Result<RankedArticles, SearchError> {
    let queries = expand_queries(q, &cfg.keywords, &cfg.templates);
    let in_flight = cfg.max_in_flight.max(1);
    let results: Vec<(ExpandedQuery, Result<Vec<ArticleMeta>, ClientError>)> = stream::iter(queries)
        .map(|eq| async move {
            let r = search_articles(&eq, cfg.per_query_limit, client).await;
            (eq, r)
        })
        .buffered(in_flight)
        .collect()
        .await;

    let mut history = SearchHistory::default();
    let mut last_err = None;
    let mut ok_batches: Vec<&[ArticleMeta]> = Vec::new();
    for (eq, r) in &results {
        match r {
            Ok(batch) => {
                for meta in batch {
                    if let Ok(bytes) = serde_json::to_vec(meta) {
                        let _ = cache.put(META_NS, &meta.article_id, &bytes);
                    }
                }
                history.entries.push(QueryLog {
                    query: eq.text.clone(),
                    result_count: batch.len(),
                    error: None,
                    relevant_ids: Vec::new(),
                });
                ok_batches.push(batch);
            }
            Err(e) => {
                history.entries.push(QueryLog {
                    query: eq.text.clone(),
                    result_count: 0,
                    error: Some(e.to_string()),
                    relevant_ids: Vec::new(),
                });
                last_err = Some(e.clone());
            }
        }
    }
    if ok_batches.is_empty() {
        let last = last_err.unwrap_or(ClientError::Malformed("no queries issued".into()));
        return Err(SearchError::AllQueriesFailed { last, history });
    }

    let ranked = rank(merge_results(ok_batches, q, cfg), cfg.threshold, q.max_papers() as usize);
    for (entry, (_, r)) in history.entries.iter_mut().zip(&results) {
        if let Ok(batch) = r {
            entry.relevant_ids = ranked
                .iter()
                .filter(|a| batch.iter().any(|m| m.article_id == a.meta.article_id))
                .map(|a| a.meta.article_id.clone())
                .collect();
        }
    }

    let fetched: Vec<Option<Result<FetchedText, ClientError>>> = stream::iter(0..ranked.len())
        .map(|i| {
            let meta = &ranked[i].meta;
            async move {
                if cfg.fetch_fulltext {
                    Some(fetch_fulltext(meta, client, cache).await)
                } else {
                    None
                }
            }
        })
        .buffered(in_flight)
        .collect()
        .await;

    let mut articles = Vec::with_capacity(ranked.len());
    for (a, f) in ranked.into_iter().zip(fetched) {
        let content = match f {
            Some(Ok(text)) => {
                let status = if text.is_full_text() {
                    FetchStatus::FullText
                } else {
                    FetchStatus::AbstractOnly
                };
                history.record_fetch(&a.meta.article_id, status);
                Some(text)
            }
            Some(Err(e)) => {
                history.record_fetch(&a.meta.article_id, FetchStatus::Failed { reason: e.to_string() });
                None
            }
            None => None,
        };
        articles.push(RankedArticle {
            meta: a.meta,
            score: a.score,
            content,
        });
    }
    Ok(RankedArticles { articles, history })
}
