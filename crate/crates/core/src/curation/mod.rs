//! Labelled dataset construction for fine-tuning: table import, negative
//! balance checks, strain-stratified splitting and chat-format JSONL export.

mod finetune;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::build_single_stage_prompt;
use crate::document::{PaperDocument, TokenBudget};
use crate::domain::{
    is_nan, parse_extraction_output, ExtractionOutcome, ExtractionRecord, StrainQuery, NAN_TOKEN, NEGATIVE_SENTINEL,
    ROLE_MESSAGE,
};

pub use finetune::{Checkpoint, FineTuneClient, FineTuneError, FineTuneJob, DEFAULT_EPOCHS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeCategory {
    WrongSpecies,
    NotProteinProduction,
    UnrelatedMicrobe,
    UnrelatedTopic,
}

impl NegativeCategory {
    pub const ALL: [NegativeCategory; 4] = [
        Self::WrongSpecies,
        Self::NotProteinProduction,
        Self::UnrelatedMicrobe,
        Self::UnrelatedTopic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::WrongSpecies => "wrong_species",
            Self::NotProteinProduction => "not_protein_production",
            Self::UnrelatedMicrobe => "unrelated_microbe",
            Self::UnrelatedTopic => "unrelated_topic",
        }
    }

    /// Accepts snake_case, kebab-case or spaced names in any case.
    pub fn parse(s: &str) -> Option<Self> {
        let norm: String = s
            .trim()
            .to_ascii_lowercase()
            .chars()
            .map(|c| if c == '-' || c == ' ' { '_' } else { c })
            .collect();
        Self::ALL.into_iter().find(|c| c.as_str() == norm)
    }
}

impl fmt::Display for NegativeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "category", rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative(NegativeCategory),
}

impl Label {
    pub fn is_positive(self) -> bool {
        matches!(self, Label::Positive)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub strain: StrainQuery,
    pub article_id: String,
    pub prompt_user_text: String,
    pub ideal_output: String,
    pub label: Label,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExampleError {
    #[error("positive ideal output does not parse as a record")]
    PositiveNotRecord,
    #[error("negative ideal output must be the negative sentinel")]
    NegativeNotSentinel,
}

impl LabeledExample {
    pub fn positive(strain: StrainQuery, article_id: impl Into<String>, prompt: impl Into<String>, record: &ExtractionRecord) -> Self {
        Self {
            strain,
            article_id: article_id.into(),
            prompt_user_text: prompt.into(),
            ideal_output: record.render(),
            label: Label::Positive,
        }
    }

    pub fn negative(
        strain: StrainQuery,
        article_id: impl Into<String>,
        prompt: impl Into<String>,
        category: NegativeCategory,
    ) -> Self {
        Self {
            strain,
            article_id: article_id.into(),
            prompt_user_text: prompt.into(),
            ideal_output: NEGATIVE_SENTINEL.to_string(),
            label: Label::Negative(category),
        }
    }

    pub fn strain_key(&self) -> String {
        self.strain.display_form()
    }

    pub fn validate(&self) -> Result<(), ExampleError> {
        match self.label {
            Label::Positive => match parse_extraction_output(&self.ideal_output) {
                Ok(ExtractionOutcome::Record(_)) => Ok(()),
                _ => Err(ExampleError::PositiveNotRecord),
            },
            Label::Negative(_) if self.ideal_output == NEGATIVE_SENTINEL => Ok(()),
            Label::Negative(_) => Err(ExampleError::NegativeNotSentinel),
        }
    }
}

pub const SOURCE_COLUMNS: [&str; 9] = [
    "genus",
    "species",
    "strain",
    "protein_pct_dry_mass",
    "trophic_mechanism",
    "reported_substrate",
    "substrate_class",
    "article_id",
    "paper_text_path",
];

pub const NEGATIVE_COLUMNS: [&str; 6] = ["genus", "species", "strain", "article_id", "paper_text_path", "category"];

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("missing columns: {}", .0.join(", "))]
    Schema(Vec<String>),
    #[error("table could not be read: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RowWarning {
    /// 1-based data row number (the header is row 0).
    pub row: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImportReport {
    pub examples: Vec<LabeledExample>,
    pub warnings: Vec<RowWarning>,
}

/// Where paper texts live and how much of each fits in a prompt.
#[derive(Debug, Clone)]
pub struct ImportOptions {
    pub base_dir: PathBuf,
    pub budget: TokenBudget,
}

fn delimiter_for(data: &str) -> u8 {
    let header = data.lines().next().unwrap_or_default();
    if header.contains('\t') {
        b'\t'
    } else {
        b','
    }
}

struct Table {
    index: BTreeMap<String, usize>,
    rows: Vec<Result<csv::StringRecord, csv::Error>>,
}

fn read_table(data: &str, required: &[&str]) -> Result<Table, CurationError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter_for(data))
        .trim(csv::Trim::All)
        .from_reader(data.as_bytes());
    let headers = reader.headers()?.clone();
    let index: BTreeMap<String, usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim_start_matches('\u{feff}').to_ascii_lowercase(), i))
        .collect();
    let missing: Vec<String> = required
        .iter()
        .filter(|c| !index.contains_key(**c))
        .map(|c| c.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(CurationError::Schema(missing));
    }
    Ok(Table {
        index,
        rows: reader.records().collect(),
    })
}

impl Table {
    fn get<'a>(&self, rec: &'a csv::StringRecord, col: &str) -> &'a str {
        self.index.get(col).and_then(|&i| rec.get(i)).unwrap_or("")
    }
}

fn load_prompt(strain: &StrainQuery, article_id: &str, path: &str, opts: &ImportOptions) -> Result<String, String> {
    let full = opts.base_dir.join(path);
    let raw = std::fs::read_to_string(&full).map_err(|e| format!("cannot read {}: {e}", full.display()))?;
    let doc = PaperDocument::curate(article_id, raw, opts.budget);
    if doc.curated_text.is_empty() {
        return Err(format!("{} has no text after curation", full.display()));
    }
    Ok(build_single_stage_prompt(strain, &doc.paper_text_slot()).user)
}

fn row_strain(t: &Table, rec: &csv::StringRecord) -> Result<StrainQuery, String> {
    let strain = t.get(rec, "strain");
    StrainQuery::new(t.get(rec, "genus"), t.get(rec, "species"), Some(strain), 1).map_err(|e| e.to_string())
}

fn require<'a>(t: &Table, rec: &'a csv::StringRecord, col: &str) -> Result<&'a str, String> {
    let v = t.get(rec, col);
    if v.is_empty() {
        Err(format!("missing {col}"))
    } else {
        Ok(v)
    }
}

fn import_rows(
    data: &str,
    required: &[&str],
    mut build: impl FnMut(&Table, &csv::StringRecord) -> Result<LabeledExample, String>,
) -> Result<ImportReport, CurationError> {
    let table = read_table(data, required)?;
    let mut report = ImportReport::default();
    for (i, row) in table.rows.iter().enumerate() {
        let outcome = match row {
            Ok(rec) => build(&table, rec),
            Err(e) => Err(e.to_string()),
        };
        match outcome {
            Ok(ex) => report.examples.push(ex),
            Err(message) => report.warnings.push(RowWarning { row: i + 1, message }),
        }
    }
    Ok(report)
}

/// One positive example per row of the source table. Blank field values
/// become "nan"; unusable rows are skipped with a warning.
pub fn import_source_table(data: &str, opts: &ImportOptions) -> Result<ImportReport, CurationError> {
    import_rows(data, &SOURCE_COLUMNS, |t, rec| {
        let strain = row_strain(t, rec)?;
        let article_id = require(t, rec, "article_id")?;
        let path = require(t, rec, "paper_text_path")?;
        let field = |c: &str| {
            let v = t.get(rec, c);
            if v.is_empty() || is_nan(v) {
                NAN_TOKEN.to_string()
            } else {
                v.to_string()
            }
        };
        let record = ExtractionRecord::new(
            field("protein_pct_dry_mass"),
            field("trophic_mechanism"),
            field("reported_substrate"),
            field("substrate_class"),
        )
        .map_err(|e| e.to_string())?;
        let prompt = load_prompt(&strain, article_id, path, opts)?;
        Ok(LabeledExample::positive(strain, article_id, prompt, &record))
    })
}

/// One negative example per row; the category column names one of the four
/// negative categories.
pub fn import_negative_table(data: &str, opts: &ImportOptions) -> Result<ImportReport, CurationError> {
    import_rows(data, &NEGATIVE_COLUMNS, |t, rec| {
        let strain = row_strain(t, rec)?;
        let article_id = require(t, rec, "article_id")?;
        let path = require(t, rec, "paper_text_path")?;
        let raw_category = t.get(rec, "category");
        let category =
            NegativeCategory::parse(raw_category).ok_or_else(|| format!("unknown category '{raw_category}'"))?;
        let prompt = load_prompt(&strain, article_id, path, opts)?;
        Ok(LabeledExample::negative(strain, article_id, prompt, category))
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrainBalance {
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub strains: BTreeMap<String, StrainBalance>,
    pub categories: BTreeMap<NegativeCategory, usize>,
}

impl BalanceReport {
    pub fn compute(examples: &[LabeledExample]) -> Self {
        let mut report = BalanceReport {
            categories: NegativeCategory::ALL.iter().map(|c| (*c, 0)).collect(),
            ..Default::default()
        };
        for ex in examples {
            let entry = report.strains.entry(ex.strain_key()).or_default();
            match ex.label {
                Label::Positive => entry.positives += 1,
                Label::Negative(c) => {
                    entry.negatives += 1;
                    *report.categories.get_mut(&c).unwrap() += 1;
                }
            }
        }
        report
    }

    /// Strains with positives but fewer negatives than positives.
    pub fn underbalanced_strains(&self) -> Vec<String> {
        self.strains
            .iter()
            .filter(|(_, b)| b.positives > 0 && b.negatives < b.positives)
            .map(|(s, _)| s.clone())
            .collect()
    }

    /// Categories more than one below the largest category count.
    pub fn short_categories(&self) -> Vec<NegativeCategory> {
        let max = self.categories.values().copied().max().unwrap_or(0);
        self.categories
            .iter()
            .filter(|(_, n)| **n + 1 < max)
            .map(|(c, _)| *c)
            .collect()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BalanceError {
    #[error("unbalanced dataset: strains lacking negatives [{}], short categories [{}]",
        .strains.join(", "),
        .categories.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(", "))]
    Unbalanced {
        strains: Vec<String>,
        categories: Vec<NegativeCategory>,
        report: BalanceReport,
    },
    #[error("example for '{strain}' in {article_id}: {source}")]
    InvalidExample {
        strain: String,
        article_id: String,
        source: ExampleError,
    },
    #[error("positives list contains a negative example for '{0}'")]
    LabelMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
    pub report: BalanceReport,
}

/// Joins positives and negatives after checking that every strain with
/// positives has at least as many negatives, and that the four negative
/// categories are equally represented within one.
pub fn attach_negatives(positives: Vec<LabeledExample>, negatives: Vec<LabeledExample>) -> Result<Dataset, BalanceError> {
    for ex in &positives {
        if !ex.label.is_positive() {
            return Err(BalanceError::LabelMismatch(ex.strain_key()));
        }
    }
    for ex in &negatives {
        if ex.label.is_positive() {
            return Err(BalanceError::LabelMismatch(ex.strain_key()));
        }
    }
    let mut examples = positives;
    examples.extend(negatives);
    for ex in &examples {
        ex.validate().map_err(|source| BalanceError::InvalidExample {
            strain: ex.strain_key(),
            article_id: ex.article_id.clone(),
            source,
        })?;
    }
    let report = BalanceReport::compute(&examples);
    let strains = report.underbalanced_strains();
    let categories = report.short_categories();
    if !strains.is_empty() || !categories.is_empty() {
        return Err(BalanceError::Unbalanced {
            strains,
            categories,
            report,
        });
    }
    Ok(Dataset { examples, report })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Validation,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Validation, Partition::Test];

    /// Target share in tenths.
    pub fn weight(self) -> usize {
        match self {
            Partition::Train => 8,
            Partition::Validation | Partition::Test => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledExample>,
    pub validation: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub assignment: BTreeMap<String, Partition>,
}

impl DatasetSplit {
    pub fn part(&self, p: Partition) -> &[LabeledExample] {
        match p {
            Partition::Train => &self.train,
            Partition::Validation => &self.validation,
            Partition::Test => &self.test,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("stratified split needs at least 3 strains, got {0}")]
pub struct TooFewStrains(pub usize);

/// Orders strains for the greedy split: descending example count, ties by
/// name, with the seed permuting strains of equal count.
pub fn split_order(counts: &BTreeMap<String, usize>, seed: u64) -> Vec<String> {
    let mut by_count: BTreeMap<std::cmp::Reverse<usize>, Vec<String>> = BTreeMap::new();
    for (strain, n) in counts {
        by_count.entry(std::cmp::Reverse(*n)).or_default().push(strain.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::with_capacity(counts.len());
    for (_, mut group) in by_count {
        group.shuffle(&mut rng);
        order.extend(group);
    }
    order
}

/// Assigns whole strains to train/validation/test, each time to the partition
/// whose example count is furthest below its 80/10/10 target.
pub fn stratified_split(examples: &[LabeledExample], seed: u64) -> Result<DatasetSplit, TooFewStrains> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for ex in examples {
        *counts.entry(ex.strain_key()).or_default() += 1;
    }
    if counts.len() < 3 {
        return Err(TooFewStrains(counts.len()));
    }
    let total = examples.len();
    let mut filled = [0usize; 3];
    let mut assignment = BTreeMap::new();
    for strain in split_order(&counts, seed) {
        // deficit_i = 10 * (target_i - current_i), compared exactly in integers.
        let deficit = |i: usize| Partition::ALL[i].weight() as i64 * total as i64 - 10 * filled[i] as i64;
        let best = (0..3).fold(0, |best, i| if deficit(i) > deficit(best) { i } else { best });
        filled[best] += counts[&strain];
        assignment.insert(strain, Partition::ALL[best]);
    }
    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        assignment,
    };
    for ex in examples {
        let target = match split.assignment[&ex.strain_key()] {
            Partition::Train => &mut split.train,
            Partition::Validation => &mut split.validation,
            Partition::Test => &mut split.test,
        };
        target.push(ex.clone());
    }
    Ok(split)
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatLine<'a> {
    messages: [ChatMessage<'a>; 3],
}

/// Chat-format fine-tuning lines, ordered by article id ascending with the
/// positive example first for a shared article.
pub fn emit_finetune_jsonl(part: &[LabeledExample]) -> Vec<u8> {
    let mut sorted: Vec<&LabeledExample> = part.iter().collect();
    sorted.sort_by(|a, b| {
        a.article_id
            .cmp(&b.article_id)
            .then_with(|| b.label.is_positive().cmp(&a.label.is_positive()))
            .then_with(|| a.strain_key().cmp(&b.strain_key()))
            .then_with(|| a.prompt_user_text.cmp(&b.prompt_user_text))
            .then_with(|| a.ideal_output.cmp(&b.ideal_output))
    });
    let mut out = Vec::new();
    for ex in sorted {
        let line = ChatLine {
            messages: [
                ChatMessage {
                    role: "system",
                    content: ROLE_MESSAGE,
                },
                ChatMessage {
                    role: "user",
                    content: &ex.prompt_user_text,
                },
                ChatMessage {
                    role: "assistant",
                    content: &ex.ideal_output,
                },
            ],
        };
        serde_json::to_writer(&mut out, &line).expect("serialising to a Vec cannot fail");
        out.push(b'\n');
    }
    out
}

/// Writes JSONL through a temporary file and a rename, so readers never see
/// a partial file.
pub fn write_finetune_jsonl(path: &Path, part: &[LabeledExample]) -> io::Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    std::fs::write(&tmp, emit_finetune_jsonl(part))?;
    std::fs::rename(tmp, path)
}

/// Distinct strains in a set of examples.
pub fn strains_of(examples: &[LabeledExample]) -> BTreeSet<String> {
    examples.iter().map(LabeledExample::strain_key).collect()
}
