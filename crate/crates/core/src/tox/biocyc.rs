//! Pathway Tools web-service adapter (BioCyc and compatible servers).

use async_trait::async_trait;
use quick_xml::events::Event;
use quick_xml::Reader;
use reqwest::header::{COOKIE, SET_COOKIE};
use reqwest::StatusCode;
use tokio::sync::Mutex;

use super::{Compound, PathwayDbClient, PathwayError};
use crate::net::{RateLimiter, RetryPolicy};

pub const DEFAULT_BIOCYC_BASE_URL: &str = "https://websvc.biocyc.org";

/// Logs in once per client, then keeps the session cookie for queries.
/// Requests are paced at one per second by default.
pub struct BioCycClient {
    http: reqwest::Client,
    base_url: String,
    credentials: Option<(String, String)>,
    session: Mutex<Option<String>>,
    limiter: RateLimiter,
    retry: RetryPolicy,
    login_path: String,
    query_path: String,
}

impl BioCycClient {
    pub fn new(base_url: impl Into<String>, credentials: Option<(String, String)>) -> Self {
        Self {
            http: reqwest::Client::new(),
            base_url: base_url.into().trim_end_matches('/').to_string(),
            credentials,
            session: Mutex::new(None),
            limiter: RateLimiter::new(1.0),
            retry: RetryPolicy::default(),
            login_path: "/credentials/login/".into(),
            query_path: "/xmlquery".into(),
        }
    }

    /// Reads `BIOCYC_BASE_URL`, `BIOCYC_USER` and `BIOCYC_PASSWORD`.
    pub fn from_env() -> Self {
        let creds = match (std::env::var("BIOCYC_USER"), std::env::var("BIOCYC_PASSWORD")) {
            (Ok(u), Ok(p)) if !u.is_empty() => Some((u, p)),
            _ => None,
        };
        Self::new(
            std::env::var("BIOCYC_BASE_URL").unwrap_or_else(|_| DEFAULT_BIOCYC_BASE_URL.to_string()),
            creds,
        )
    }

    pub fn with_rate(mut self, per_second: f64) -> Self {
        self.limiter = RateLimiter::new(per_second);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_paths(mut self, login_path: &str, query_path: &str) -> Self {
        self.login_path = login_path.into();
        self.query_path = query_path.into();
        self
    }

    async fn session_cookie(&self) -> Result<Option<String>, PathwayError> {
        let Some((user, password)) = &self.credentials else {
            return Ok(None);
        };
        let mut session = self.session.lock().await;
        if let Some(c) = session.as_ref() {
            return Ok(Some(c.clone()));
        }
        self.limiter.acquire().await;
        let resp = self
            .http
            .post(format!("{}{}", self.base_url, self.login_path))
            .form(&[("email", user.as_str()), ("password", password.as_str())])
            .send()
            .await
            .map_err(|e| PathwayError::Transport(e.to_string()))?;
        let status = resp.status();
        if status == StatusCode::UNAUTHORIZED || status == StatusCode::FORBIDDEN {
            return Err(PathwayError::Auth(format!("login rejected with HTTP {status}")));
        }
        if !status.is_success() && !status.is_redirection() {
            return Err(PathwayError::Transport(format!("login: HTTP {status}")));
        }
        let cookie = resp
            .headers()
            .get_all(SET_COOKIE)
            .iter()
            .filter_map(|v| v.to_str().ok())
            .filter_map(|v| v.split(';').next())
            .collect::<Vec<_>>()
            .join("; ");
        if cookie.is_empty() {
            return Err(PathwayError::Auth("login returned no session cookie".into()));
        }
        *session = Some(cookie.clone());
        Ok(Some(cookie))
    }

    async fn query_once(&self, organism_id: &str) -> Result<String, PathwayError> {
        let cookie = self.session_cookie().await?;
        self.limiter.acquire().await;
        let query = format!("[x:x<-{organism_id}^^compounds]");
        let mut req = self
            .http
            .get(format!("{}{}", self.base_url, self.query_path))
            .query(&[("query", query.as_str()), ("detail", "full")]);
        if let Some(c) = cookie {
            req = req.header(COOKIE, c);
        }
        let resp = req.send().await.map_err(|e| PathwayError::Transport(e.to_string()))?;
        match resp.status() {
            s if s.is_success() => resp.text().await.map_err(|e| PathwayError::Transport(e.to_string())),
            StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => {
                *self.session.lock().await = None;
                Err(PathwayError::Auth(format!("query rejected with HTTP {}", resp.status())))
            }
            StatusCode::NOT_FOUND => Err(PathwayError::UnknownOrganism(organism_id.to_string())),
            s => Err(PathwayError::Transport(format!("query: HTTP {s}"))),
        }
    }
}

#[async_trait]
impl PathwayDbClient for BioCycClient {
    async fn organism_compounds(&self, organism_id: &str) -> Result<Vec<Compound>, PathwayError> {
        let body = self
            .retry
            .run(PathwayError::is_retryable, || self.query_once(organism_id))
            .await?;
        parse_compounds_xml(&body, organism_id)
    }
}

/// Reads `<Compound ID=...>` elements with their common name and CAS dblink.
/// A response holding an `<error>` element and no compounds means the
/// organism is unknown.
pub fn parse_compounds_xml(xml: &str, organism_id: &str) -> Result<Vec<Compound>, PathwayError> {
    let mut reader = Reader::from_str(xml);
    reader.config_mut().trim_text(true);
    let mut out = Vec::new();
    let mut stack: Vec<String> = Vec::new();
    let mut current: Option<(String, String, Option<String>)> = None;
    let mut dblink_db = String::new();
    let mut dblink_oid = String::new();
    let mut saw_error = false;
    loop {
        match reader.read_event() {
            Ok(Event::Start(e)) => {
                let name = String::from_utf8_lossy(e.name().as_ref()).to_string();
                if name == "Compound" && current.is_none() {
                    let id = e
                        .attributes()
                        .flatten()
                        .find(|a| a.key.as_ref() == b"ID" || a.key.as_ref() == b"frameid")
                        .map(|a| String::from_utf8_lossy(&a.value).to_string())
                        .unwrap_or_default();
                    current = Some((id, String::new(), None));
                } else if name == "dblink" {
                    dblink_db.clear();
                    dblink_oid.clear();
                } else if name.eq_ignore_ascii_case("error") {
                    saw_error = true;
                }
                stack.push(name);
            }
            Ok(Event::End(e)) => {
                let name = String::from_utf8_lossy(e.name().as_ref()).to_string();
                stack.pop();
                if name == "dblink" {
                    if let Some(c) = current.as_mut() {
                        if dblink_db.eq_ignore_ascii_case("CAS") && c.2.is_none() {
                            c.2 = Some(dblink_oid.clone());
                        }
                    }
                } else if name == "Compound" && !stack.iter().any(|s| s == "Compound") {
                    if let Some((id, n, cas)) = current.take() {
                        out.push(Compound::new(id, n, cas.as_deref()));
                    }
                }
            }
            Ok(Event::Text(t)) => {
                let text = t.unescape().map_err(|e| PathwayError::Malformed(e.to_string()))?.to_string();
                let tag = stack.last().map(String::as_str).unwrap_or("");
                let parent = stack.len().checked_sub(2).map(|i| stack[i].as_str()).unwrap_or("");
                match (parent, tag) {
                    ("Compound", "common-name") => {
                        if let Some(c) = current.as_mut() {
                            c.1 = text;
                        }
                    }
                    ("dblink", "dblink-db") => dblink_db = text,
                    ("dblink", "dblink-oid") => dblink_oid = text,
                    _ => {}
                }
            }
            Ok(Event::Eof) => break,
            Ok(_) => {}
            Err(e) => return Err(PathwayError::Malformed(e.to_string())),
        }
    }
    if out.is_empty() && saw_error {
        return Err(PathwayError::UnknownOrganism(organism_id.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"<?xml version="1.0"?>
<ptools-xml>
  <Compound ID="ECOLI:FORMALDEHYDE" orgid="ECOLI" frameid="FORMALDEHYDE">
    <common-name datatype="string">formaldehyde</common-name>
    <dblink><dblink-db>PUBCHEM</dblink-db><dblink-oid>712</dblink-oid></dblink>
    <dblink><dblink-db>CAS</dblink-db><dblink-oid>50-00-0</dblink-oid></dblink>
  </Compound>
  <Compound ID="ECOLI:WATER">
    <common-name>H&lt;sub&gt;2&lt;/sub&gt;O</common-name>
    <parent><Compound resource="getxml?ECOLI:Inorganic" /></parent>
  </Compound>
</ptools-xml>"#;

    #[test]
    fn parses_compounds() {
        let list = parse_compounds_xml(SAMPLE, "ECOLI").unwrap();
        assert_eq!(list.len(), 2);
        assert_eq!(list[0].compound_id, "ECOLI:FORMALDEHYDE");
        assert_eq!(list[0].name, "formaldehyde");
        assert_eq!(list[0].cas.as_deref(), Some("50-00-0"));
        assert_eq!(list[1].name, "H<sub>2</sub>O");
        assert_eq!(list[1].cas, None);
    }

    #[test]
    fn error_document_means_unknown() {
        let xml = "<ptools-xml><metadata/><error>Unknown organism NOPE</error></ptools-xml>";
        assert_eq!(parse_compounds_xml(xml, "NOPE"), Err(PathwayError::UnknownOrganism("NOPE".into())));
        assert_eq!(parse_compounds_xml("<ptools-xml/>", "X"), Ok(vec![]));
    }
}
