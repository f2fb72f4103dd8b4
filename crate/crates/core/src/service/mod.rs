//! Analysis jobs: the state machine, persistence, orchestration of the
//! search → extraction → screening pipeline, and the HTTP API.

pub mod http;
mod orchestrator;
mod store;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{AgentVariant, ExtractionRecord, Strategy, NAN_TOKEN};
use crate::search::{PaperStatus, SearchHistory};
use crate::tox::ScreenReport;

pub use orchestrator::{AnalysisService, CreateError, Providers, ServiceSettings};
pub use store::{JobRecord, JobStore, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Searching,
    Extracting,
    Screening,
    Done,
    Failed,
}

impl JobState {
    pub const ORDER: [JobState; 5] = [
        JobState::Queued,
        JobState::Searching,
        JobState::Extracting,
        JobState::Screening,
        JobState::Done,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Done | Self::Failed)
    }

    /// Forward by exactly one step, or to `Failed` from any non-terminal state.
    pub fn can_transition_to(self, next: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, next),
            (Queued, Searching) | (Searching, Extracting) | (Extracting, Screening) | (Screening, Done)
        ) || (next == Failed && !self.is_terminal())
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Queued => "queued",
            Self::Searching => "searching",
            Self::Extracting => "extracting",
            Self::Screening => "screening",
            Self::Done => "done",
            Self::Failed => "failed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ORDER
            .into_iter()
            .chain([Self::Failed])
            .find(|st| st.as_str() == s)
    }
}

/// Body of `POST /api/analyses`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRequest {
    pub species: String,
    pub max_papers: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_epoch: Option<u32>,
    /// Pathway-database organism to screen; screening is skipped without it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub organism_id: Option<String>,
}

impl AnalysisRequest {
    pub fn new(species: impl Into<String>, max_papers: u32) -> Self {
        Self {
            species: species.into(),
            max_papers,
            strategy: None,
            model: None,
            temperature: None,
            checkpoint_epoch: None,
            organism_id: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub papers_found: usize,
    pub papers_fetched: usize,
    pub papers_extracted: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// A state transition.
    State,
    /// A per-paper milestone inside the current state.
    Paper,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::State => "state",
            Self::Paper => "paper",
        }
    }
}

/// One entry of a job's append-only event log. `id` counts from 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobEvent {
    pub id: u64,
    #[serde(rename = "type")]
    pub kind: EventKind,
    pub state: JobState,
    pub message: String,
    pub progress: Progress,
}

impl JobEvent {
    pub fn is_terminal(&self) -> bool {
        self.kind == EventKind::State && self.state.is_terminal()
    }
}

/// Modal value(s) of one field. Empty `values` means no paper reported it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldConsensus {
    pub values: Vec<String>,
    /// Papers supporting each listed value.
    pub support: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Consensus {
    pub protein_pct_dry_mass: FieldConsensus,
    pub trophic_mechanism: FieldConsensus,
    pub reported_substrate: FieldConsensus,
    pub substrate_class: FieldConsensus,
}

/// Mode of the non-nan values; ties list every tied value in sorted order.
pub fn field_mode<'a>(values: impl IntoIterator<Item = &'a str>) -> FieldConsensus {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for v in values {
        let v = v.trim();
        if v.is_empty() || v.eq_ignore_ascii_case(NAN_TOKEN) {
            continue;
        }
        *counts.entry(v).or_default() += 1;
    }
    let support = counts.values().copied().max().unwrap_or(0);
    FieldConsensus {
        values: counts
            .into_iter()
            .filter(|(_, c)| *c == support)
            .map(|(v, _)| v.to_string())
            .collect(),
        support,
    }
}

pub fn consensus(records: &[ExtractionRecord]) -> Consensus {
    let field = |i: usize| field_mode(records.iter().map(|r| r.fields()[i]));
    Consensus {
        protein_pct_dry_mass: field(0),
        trophic_mechanism: field(1),
        reported_substrate: field(2),
        substrate_class: field(3),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaperOutcome {
    pub article_id: String,
    pub title: String,
    pub status: PaperStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<ExtractionRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToxicitySection {
    pub organism_id: Option<String>,
    pub report: Option<ScreenReport>,
    pub error: Option<String>,
}

/// Everything a finished job produced. Contains no timestamps or job ids, so
/// identical inputs serialise to identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisResult {
    pub species: String,
    pub variant: AgentVariant,
    /// Papers for which the agent returned a record or the negative sentinel.
    pub papers_analysed: usize,
    pub consensus: Consensus,
    pub papers: Vec<PaperOutcome>,
    pub toxicity: ToxicitySection,
    pub search_history: SearchHistory,
}
