//! Mutagenicity screening of an organism's metabolite inventory by CAS
//! registry number.

mod biocyc;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::KvStore;

pub use biocyc::{parse_compounds_xml, BioCycClient, DEFAULT_BIOCYC_BASE_URL};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CasError {
    #[error("'{0}' is not of the form NNNNNNN-NN-N")]
    Format(String),
    #[error("'{raw}' fails the check digit (expected {expected})")]
    Checksum { raw: String, expected: u32 },
}

/// Check digit of the digits preceding it: weights 1, 2, 3, ... from the
/// right, sum mod 10.
pub fn cas_check_digit(body_digits: &str) -> u32 {
    body_digits
        .chars()
        .rev()
        .zip(1u32..)
        .map(|(c, w)| c.to_digit(10).unwrap_or(0) * w)
        .sum::<u32>()
        % 10
}

/// Removes whitespace, validates the layout and check digit, and trims
/// leading zeros of the first group down to two digits.
pub fn normalize_cas(raw: &str) -> Result<String, CasError> {
    let compact: String = raw.chars().filter(|c| !c.is_whitespace()).collect();
    let groups: Vec<&str> = compact.split('-').collect();
    let all_digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    let [first, second, check] = groups.as_slice() else {
        return Err(CasError::Format(raw.to_string()));
    };
    if !(all_digits(first) && all_digits(second) && all_digits(check))
        || !(2..=7).contains(&first.len())
        || second.len() != 2
        || check.len() != 1
    {
        return Err(CasError::Format(raw.to_string()));
    }
    let mut first = *first;
    while first.len() > 2 && first.starts_with('0') {
        first = &first[1..];
    }
    let expected = cas_check_digit(&format!("{first}{second}"));
    if check.parse::<u32>().unwrap() != expected {
        return Err(CasError::Checksum {
            raw: raw.to_string(),
            expected,
        });
    }
    Ok(format!("{first}-{second}-{check}"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Compound {
    pub compound_id: String,
    pub name: String,
    /// Canonical CAS number, when the database gave a valid one.
    pub cas: Option<String>,
    /// Why a CAS number supplied by the database was discarded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cas_issue: Option<String>,
}

impl Compound {
    pub fn new(compound_id: impl Into<String>, name: impl Into<String>, raw_cas: Option<&str>) -> Self {
        let (cas, cas_issue) = match raw_cas.map(str::trim).filter(|c| !c.is_empty()) {
            None => (None, None),
            Some(raw) => match normalize_cas(raw) {
                Ok(c) => (Some(c), None),
                Err(e) => (None, Some(e.to_string())),
            },
        };
        Self {
            compound_id: compound_id.into(),
            name: name.into(),
            cas,
            cas_issue,
        }
    }
}

/// Ames outcomes keyed by canonical CAS.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToxDataset {
    pub records: BTreeMap<String, ToxRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToxRecord {
    pub cas: String,
    pub mutagenic: bool,
    pub source_row: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ToxRowError {
    /// 1-based data row.
    pub row: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ToxLoad {
    pub dataset: ToxDataset,
    pub row_errors: Vec<ToxRowError>,
}

#[derive(Debug, Error)]
pub enum ToxLoadError {
    #[error("missing columns: {}", .0.join(", "))]
    Schema(Vec<String>),
    #[error("CAS {cas} is labelled both mutagenic and non-mutagenic (rows {first_row} and {second_row})")]
    DuplicateConflict {
        cas: String,
        first_row: usize,
        second_row: usize,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn parse_label(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" => Some(true),
        "0" | "false" => Some(false),
        _ => None,
    }
}

/// Reads a `cas,mutagenic` table. Bad rows are collected, not fatal;
/// duplicates with the same label collapse, conflicting ones are rejected.
pub fn load_tox_dataset(data: &str) -> Result<ToxLoad, ToxLoadError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(data.as_bytes());
    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim_start_matches('\u{feff}').to_ascii_lowercase())
        .collect();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (cas_col, label_col) = match (col("cas"), col("mutagenic")) {
        (Some(c), Some(m)) => (c, m),
        (c, m) => {
            let mut missing = Vec::new();
            if c.is_none() {
                missing.push("cas".to_string());
            }
            if m.is_none() {
                missing.push("mutagenic".to_string());
            }
            return Err(ToxLoadError::Schema(missing));
        }
    };
    let mut load = ToxLoad::default();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                load.row_errors.push(ToxRowError { row, message: e.to_string() });
                continue;
            }
        };
        let raw_cas = rec.get(cas_col).unwrap_or("");
        let cas = match normalize_cas(raw_cas) {
            Ok(c) => c,
            Err(e) => {
                load.row_errors.push(ToxRowError { row, message: e.to_string() });
                continue;
            }
        };
        let raw_label = rec.get(label_col).unwrap_or("");
        let Some(mutagenic) = parse_label(raw_label) else {
            load.row_errors.push(ToxRowError {
                row,
                message: format!("mutagenic value '{raw_label}' is not 0/1/true/false"),
            });
            continue;
        };
        match load.dataset.records.get(&cas) {
            Some(prev) if prev.mutagenic != mutagenic => {
                return Err(ToxLoadError::DuplicateConflict {
                    cas,
                    first_row: prev.source_row,
                    second_row: row,
                })
            }
            Some(_) => {}
            None => {
                load.dataset.records.insert(
                    cas.clone(),
                    ToxRecord {
                        cas,
                        mutagenic,
                        source_row: row,
                    },
                );
            }
        }
    }
    Ok(load)
}

impl ToxDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, cas: &str) -> Option<&ToxRecord> {
        self.records.get(cas)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PathwayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("unknown organism '{0}'")]
    UnknownOrganism(String),
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl PathwayError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::Transport(_))
    }
}

/// An organism-specific metabolic database.
#[async_trait]
pub trait PathwayDbClient: Send + Sync {
    async fn organism_compounds(&self, organism_id: &str) -> Result<Vec<Compound>, PathwayError>;
}

/// Replays compound lists per organism id.
#[derive(Debug, Default)]
pub struct FixturePathwayClient {
    organisms: BTreeMap<String, Vec<Compound>>,
    calls: AtomicUsize,
}

impl FixturePathwayClient {
    pub fn new(organisms: BTreeMap<String, Vec<Compound>>) -> Self {
        Self {
            organisms,
            calls: AtomicUsize::new(0),
        }
    }

    /// JSON object `{organism_id: [{compound_id, name, cas}]}` with raw CAS text.
    pub fn from_json_str(text: &str) -> serde_json::Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            compound_id: String,
            #[serde(default)]
            name: String,
            #[serde(default)]
            cas: Option<String>,
        }
        let raw: BTreeMap<String, Vec<Raw>> = serde_json::from_str(text)?;
        Ok(Self::new(
            raw.into_iter()
                .map(|(org, list)| {
                    let compounds = list
                        .into_iter()
                        .map(|r| Compound::new(r.compound_id, r.name, r.cas.as_deref()))
                        .collect();
                    (org, compounds)
                })
                .collect(),
        ))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl PathwayDbClient for FixturePathwayClient {
    async fn organism_compounds(&self, organism_id: &str) -> Result<Vec<Compound>, PathwayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.organisms
            .get(organism_id)
            .cloned()
            .ok_or_else(|| PathwayError::UnknownOrganism(organism_id.to_string()))
    }
}

pub const COMPOUND_CACHE_NAMESPACE: &str = "organism_compounds";

/// Deduplicates by compound id (a later duplicate only fills in a missing
/// CAS) and sorts by id. Results are cached per organism.
pub async fn fetch_organism_compounds(
    organism_id: &str,
    client: &dyn PathwayDbClient,
    cache: &dyn KvStore,
) -> Result<Vec<Compound>, PathwayError> {
    let organism_id = organism_id.trim();
    if organism_id.is_empty() {
        return Err(PathwayError::UnknownOrganism(String::new()));
    }
    if let Ok(Some(bytes)) = cache.get(COMPOUND_CACHE_NAMESPACE, organism_id) {
        if let Ok(list) = serde_json::from_slice(&bytes) {
            return Ok(list);
        }
    }
    let mut by_id: BTreeMap<String, Compound> = BTreeMap::new();
    for c in client.organism_compounds(organism_id).await? {
        match by_id.get_mut(&c.compound_id) {
            Some(existing) if existing.cas.is_none() && c.cas.is_some() => *existing = c,
            Some(_) => {}
            None => {
                by_id.insert(c.compound_id.clone(), c);
            }
        }
    }
    let list: Vec<Compound> = by_id.into_values().collect();
    if let Err(e) = cache.put(COMPOUND_CACHE_NAMESPACE, organism_id, &serde_json::to_vec(&list).unwrap()) {
        tracing::warn!(error = %e, "compound cache write failed");
    }
    Ok(list)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreenMatch {
    pub compound: Compound,
    pub tox: ToxRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreenReport {
    pub organism_id: String,
    pub total_compounds: usize,
    pub with_cas: usize,
    /// Compounds whose CAS is mutagenic in the dataset.
    pub flagged: Vec<ScreenMatch>,
    /// Matches labelled non-mutagenic, kept as negatives.
    pub non_mutagenic: Vec<ScreenMatch>,
    /// Compound ids without a usable CAS number.
    pub unmatchable: Vec<String>,
}

/// Exact canonical-CAS matching of an inventory against the dataset.
pub fn screen_compounds(organism_id: &str, compounds: &[Compound], tox: &ToxDataset) -> ScreenReport {
    let mut sorted: Vec<&Compound> = compounds.iter().collect();
    sorted.sort_by(|a, b| a.compound_id.cmp(&b.compound_id));
    let mut report = ScreenReport {
        organism_id: organism_id.to_string(),
        total_compounds: compounds.len(),
        with_cas: 0,
        flagged: Vec::new(),
        non_mutagenic: Vec::new(),
        unmatchable: Vec::new(),
    };
    for c in sorted {
        let Some(cas) = &c.cas else {
            report.unmatchable.push(c.compound_id.clone());
            continue;
        };
        report.with_cas += 1;
        if let Some(entry) = tox.get(cas) {
            let m = ScreenMatch {
                compound: c.clone(),
                tox: entry.clone(),
            };
            if entry.mutagenic {
                report.flagged.push(m);
            } else {
                report.non_mutagenic.push(m);
            }
        }
    }
    report
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScreenError {
    #[error("toxicity dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Fetch(#[from] PathwayError),
}

pub async fn screen(
    organism_id: &str,
    client: &dyn PathwayDbClient,
    cache: &dyn KvStore,
    tox: &ToxDataset,
) -> Result<ScreenReport, ScreenError> {
    if tox.is_empty() {
        return Err(ScreenError::EmptyDataset);
    }
    let compounds = fetch_organism_compounds(organism_id, client, cache).await?;
    Ok(screen_compounds(organism_id.trim(), &compounds, tox))
}

/// Canonical CAS numbers flagged in a report.
pub fn flagged_cas(report: &ScreenReport) -> BTreeSet<String> {
    report
        .flagged
        .iter()
        .filter_map(|m| m.compound.cas.clone())
        .collect()
}
