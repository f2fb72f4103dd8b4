use serde::{Deserialize, Serialize};

/// One issued query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryLog {
    pub query: String,
    pub result_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Ids from this query's results that made the final ranking.
    pub relevant_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FetchStatus {
    FullText,
    AbstractOnly,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PaperStatus {
    Extracted,
    Negative,
    Failed { reason: String },
}

impl PaperStatus {
    pub fn succeeded(&self) -> bool {
        !matches!(self, Self::Failed { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaperLog {
    pub article_id: String,
    pub fetch: FetchStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extraction: Option<PaperStatus>,
}

/// Traceability log of a search: every query issued and what happened to
/// each relevant paper. Entries are only ever appended; a paper's extraction
/// status is written at most once.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHistory {
    pub entries: Vec<QueryLog>,
    pub papers: Vec<PaperLog>,
}

impl SearchHistory {
    pub fn record_fetch(&mut self, article_id: &str, fetch: FetchStatus) {
        self.papers.push(PaperLog {
            article_id: article_id.to_string(),
            fetch,
            extraction: None,
        });
    }

    /// Returns false when the paper is unknown or its status is already set.
    pub fn record_extraction(&mut self, article_id: &str, status: PaperStatus) -> bool {
        match self
            .papers
            .iter_mut()
            .find(|p| p.article_id == article_id && p.extraction.is_none())
        {
            Some(p) => {
                p.extraction = Some(status);
                true
            }
            None => false,
        }
    }

    pub fn fetch_failures(&self) -> usize {
        self.papers
            .iter()
            .filter(|p| matches!(p.fetch, FetchStatus::Failed { .. }))
            .count()
    }
}
