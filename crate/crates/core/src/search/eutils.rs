//! NCBI E-utilities adapter: esearch for ids, efetch for titles and abstracts,
//! elink + PMC efetch for open-access body text.

use async_trait::async_trait;
use quick_xml::events::Event;
use quick_xml::Reader;
use reqwest::StatusCode;
use serde_json::Value;

use super::{ArticleMeta, BibliographicClient, ClientError};
use crate::net::{RateLimiter, RetryPolicy};

pub const DEFAULT_BASE_URL: &str = "https://eutils.ncbi.nlm.nih.gov/entrez/eutils";

pub struct EutilsClient {
    http: reqwest::Client,
    base_url: String,
    api_key: Option<String>,
    limiter: RateLimiter,
    retry: RetryPolicy,
}

impl EutilsClient {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        let api_key = api_key.filter(|k| !k.is_empty());
        Self {
            http: reqwest::Client::new(),
            base_url: base_url.into().trim_end_matches('/').to_string(),
            limiter: RateLimiter::for_eutils(api_key.is_some()),
            api_key,
            retry: RetryPolicy::default(),
        }
    }

    /// Reads `PUBMED_BASE_URL` and `PUBMED_API_KEY`.
    pub fn from_env() -> Self {
        Self::new(
            std::env::var("PUBMED_BASE_URL").unwrap_or_else(|_| DEFAULT_BASE_URL.to_string()),
            std::env::var("PUBMED_API_KEY").ok(),
        )
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_rate(mut self, per_second: f64) -> Self {
        self.limiter = RateLimiter::new(per_second);
        self
    }

    async fn get(&self, endpoint: &str, params: &[(&str, &str)]) -> Result<String, ClientError> {
        let url = format!("{}/{}", self.base_url, endpoint);
        let mut query: Vec<(&str, &str)> = params.to_vec();
        if let Some(key) = &self.api_key {
            query.push(("api_key", key));
        }
        self.retry
            .run(ClientError::is_retryable, || async {
                self.limiter.acquire().await;
                let resp = self
                    .http
                    .get(&url)
                    .query(&query)
                    .send()
                    .await
                    .map_err(|e| ClientError::Transport(e.to_string()))?;
                match resp.status() {
                    s if s.is_success() => resp
                        .text()
                        .await
                        .map_err(|e| ClientError::Transport(e.to_string())),
                    StatusCode::TOO_MANY_REQUESTS => Err(ClientError::RateLimited),
                    StatusCode::NOT_FOUND => Err(ClientError::NotFound(endpoint.to_string())),
                    s => Err(ClientError::Transport(format!("{endpoint}: HTTP {s}"))),
                }
            })
            .await
    }
}

#[async_trait]
impl BibliographicClient for EutilsClient {
    async fn search(&self, query: &str, limit: u32) -> Result<Vec<ArticleMeta>, ClientError> {
        let retmax = limit.to_string();
        let body = self
            .get(
                "esearch.fcgi",
                &[("db", "pubmed"), ("term", query), ("retmax", &retmax), ("retmode", "json")],
            )
            .await?;
        let ids = parse_esearch_ids(&body)?;
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        let joined = ids.join(",");
        let xml = self
            .get("efetch.fcgi", &[("db", "pubmed"), ("id", &joined), ("retmode", "xml")])
            .await?;
        let mut articles = parse_pubmed_articles(&xml)?;
        // Keep esearch relevance order.
        articles.sort_by_key(|a| ids.iter().position(|id| *id == a.article_id).unwrap_or(usize::MAX));
        Ok(articles)
    }

    async fn fetch_fulltext(&self, article: &ArticleMeta) -> Result<Option<String>, ClientError> {
        let body = self
            .get(
                "elink.fcgi",
                &[
                    ("dbfrom", "pubmed"),
                    ("db", "pmc"),
                    ("linkname", "pubmed_pmc"),
                    ("id", &article.article_id),
                    ("retmode", "json"),
                ],
            )
            .await?;
        let Some(pmc_id) = parse_elink_pmc(&body)? else {
            return Ok(None);
        };
        let xml = self
            .get("efetch.fcgi", &[("db", "pmc"), ("id", &pmc_id), ("retmode", "xml")])
            .await?;
        Ok(parse_pmc_body(&xml)?.filter(|t| !t.trim().is_empty()))
    }
}

pub fn parse_esearch_ids(body: &str) -> Result<Vec<String>, ClientError> {
    let v: Value = serde_json::from_str(body).map_err(|e| ClientError::Malformed(e.to_string()))?;
    let list = v
        .pointer("/esearchresult/idlist")
        .and_then(Value::as_array)
        .ok_or_else(|| ClientError::Malformed("esearch: missing esearchresult.idlist".into()))?;
    list.iter()
        .map(|id| {
            id.as_str()
                .map(str::to_string)
                .ok_or_else(|| ClientError::Malformed("esearch: non-string id".into()))
        })
        .collect()
}

pub fn parse_elink_pmc(body: &str) -> Result<Option<String>, ClientError> {
    let v: Value = serde_json::from_str(body).map_err(|e| ClientError::Malformed(e.to_string()))?;
    let linksets = v
        .get("linksets")
        .and_then(Value::as_array)
        .ok_or_else(|| ClientError::Malformed("elink: missing linksets".into()))?;
    for set in linksets {
        for db in set.get("linksetdbs").and_then(Value::as_array).into_iter().flatten() {
            if db.get("linkname").and_then(Value::as_str) != Some("pubmed_pmc") {
                continue;
            }
            if let Some(first) = db.get("links").and_then(Value::as_array).and_then(|l| l.first()) {
                let id = match first {
                    Value::String(s) => s.clone(),
                    Value::Number(n) => n.to_string(),
                    _ => continue,
                };
                return Ok(Some(id));
            }
        }
    }
    Ok(None)
}

fn xml_err(e: impl std::fmt::Display) -> ClientError {
    ClientError::Malformed(format!("xml: {e}"))
}

/// Extracts id, title, abstract and PMC availability from a PubmedArticleSet.
pub fn parse_pubmed_articles(xml: &str) -> Result<Vec<ArticleMeta>, ClientError> {
    let mut reader = Reader::from_str(xml);
    let mut out = Vec::new();
    let mut path: Vec<String> = Vec::new();
    let mut current: Option<ArticleMeta> = None;
    let mut abstract_parts: Vec<String> = Vec::new();
    let mut pmc_attr = false;

    loop {
        match reader.read_event().map_err(xml_err)? {
            Event::Start(e) => {
                let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
                if name == "PubmedArticle" {
                    current = Some(ArticleMeta {
                        article_id: String::new(),
                        title: String::new(),
                        r#abstract: None,
                        full_text_available: false,
                    });
                    abstract_parts.clear();
                }
                if name == "AbstractText" {
                    abstract_parts.push(String::new());
                }
                if name == "ArticleId" {
                    pmc_attr = e.attributes().flatten().any(|a| {
                        a.key.as_ref() == b"IdType" && a.value.as_ref() == b"pmc"
                    });
                }
                path.push(name);
            }
            Event::End(_) => {
                let name = path.pop().unwrap_or_default();
                if name == "PubmedArticle" {
                    if let Some(mut a) = current.take() {
                        let abs = abstract_parts
                            .iter()
                            .map(|s| s.trim())
                            .filter(|s| !s.is_empty())
                            .collect::<Vec<_>>()
                            .join("\n");
                        a.r#abstract = (!abs.is_empty()).then_some(abs);
                        a.title = a.title.trim().to_string();
                        if !a.article_id.is_empty() {
                            out.push(a);
                        }
                    }
                }
            }
            Event::Text(t) => {
                let text = t.unescape().map_err(xml_err)?;
                let Some(a) = current.as_mut() else { continue };
                let inside = |tag: &str| path.iter().any(|p| p == tag);
                let leaf = path.last().map(String::as_str).unwrap_or("");
                if leaf == "PMID" && inside("MedlineCitation") && a.article_id.is_empty() {
                    a.article_id = text.trim().to_string();
                } else if inside("ArticleTitle") {
                    a.title.push_str(&text);
                } else if inside("AbstractText") {
                    if let Some(last) = abstract_parts.last_mut() {
                        last.push_str(&text);
                    }
                } else if leaf == "ArticleId" && inside("PubmedData") && pmc_attr && !text.trim().is_empty() {
                    a.full_text_available = true;
                }
            }
            Event::Eof => break,
            _ => {}
        }
    }
    Ok(out)
}

/// Plain text of the `<body>` of a PMC article, paragraphs separated by blank
/// lines. `None` when the article has no body (not in the open-access subset).
pub fn parse_pmc_body(xml: &str) -> Result<Option<String>, ClientError> {
    let mut reader = Reader::from_str(xml);
    let mut depth_in_body = 0usize;
    let mut seen_body = false;
    let mut out = String::new();
    loop {
        match reader.read_event().map_err(xml_err)? {
            Event::Start(e) => {
                let name = e.name();
                if name.as_ref() == b"body" {
                    seen_body = true;
                    depth_in_body += 1;
                } else if depth_in_body > 0 {
                    depth_in_body += 1;
                }
            }
            Event::End(e) => {
                if depth_in_body > 0 {
                    depth_in_body -= 1;
                    if matches!(e.name().as_ref(), b"p" | b"title" | b"caption") {
                        out.push_str("\n\n");
                    }
                }
            }
            Event::Text(t) if depth_in_body > 0 => {
                out.push_str(&t.unescape().map_err(xml_err)?);
            }
            Event::Eof => break,
            _ => {}
        }
    }
    if !seen_body {
        return Ok(None);
    }
    let paragraphs: Vec<String> = out
        .split("\n\n")
        .map(|p| p.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|p| !p.is_empty())
        .collect();
    Ok(Some(paragraphs.join("\n\n")))
}
