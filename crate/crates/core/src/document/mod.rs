//! Paper text curation: reference stripping, cleanup, token estimation and
//! start/end splitting for context-limited models.

mod extract;
mod store;

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};

pub use extract::{CommandExtractor, ExtractionFailed, FixtureExtractor, TextExtractor};
pub use store::{load_document, save_document, DocumentSidecar, PartSidecar};

/// Headings must end inside the last 40% of the text to count.
const REFERENCE_TAIL_FRACTION: (usize, usize) = (3, 5);

static REFERENCE_HEADING: Lazy<Regex> = Lazy::new(|| {
    Regex::new(
        r"(?i)^\s*(?:(?:\d+|[ivxlc]+)(?:\.\d+)*[.)]?\s+)?(?:references|bibliography|literature\s+cited)\s*:?\s*$",
    )
    .unwrap()
});

/// Truncates at the last reference-section heading in the tail of the text.
///
/// A heading is a line consisting only of "References", "Bibliography" or
/// "Literature cited", optionally numbered. Headings that end before the last
/// 40% of the text are ignored so in-text mentions early on never truncate.
pub fn strip_references(text: &str) -> &str {
    let tail_start = text.len() * REFERENCE_TAIL_FRACTION.0 / REFERENCE_TAIL_FRACTION.1;
    let mut cut = None;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let content = line.trim_end_matches(['\n', '\r']);
        let end = offset + content.len();
        if end > tail_start && REFERENCE_HEADING.is_match(content) {
            cut = Some(offset);
        }
        offset += line.len();
    }
    match cut {
        Some(at) => text[..at].trim_end(),
        None => text,
    }
}

static PAGE_NUMBER: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"(?i)^(?:page\s+)?\d{1,4}(?:\s*(?:/|of)\s*\d{1,4})?$").unwrap());
static DOWNLOADED_FROM: Lazy<Regex> = Lazy::new(|| Regex::new(r"(?i)^downloaded from\b").unwrap());
static DOI_ONLY: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"(?i)^(?:doi:\s*|https?://(?:dx\.)?doi\.org/)?10\.\d{4,9}/\S+$").unwrap()
});

fn is_noise_line(line: &str) -> bool {
    if line.is_empty() {
        return false;
    }
    if PAGE_NUMBER.is_match(line) || DOWNLOADED_FROM.is_match(line) || DOI_ONLY.is_match(line) {
        return true;
    }
    let (mut total, mut symbols) = (0usize, 0usize);
    for c in line.chars().filter(|c| !c.is_whitespace()) {
        total += 1;
        if !c.is_alphanumeric() {
            symbols += 1;
        }
    }
    total > 0 && symbols * 5 >= total * 4
}

/// Normalises whitespace and drops header/footer debris.
///
/// Runs of spaces and tabs become one space, lines are trimmed, lines that are
/// at least 80% symbols or look like page numbers, "Downloaded from" banners or
/// bare DOIs are removed, and three or more newlines collapse to two.
/// The function is idempotent.
pub fn clean_text(text: &str) -> String {
    let normalized = text.replace("\r\n", "\n").replace('\r', "\n");
    let mut kept: Vec<String> = Vec::new();
    for line in normalized.split('\n') {
        let line = line
            .split([' ', '\t'])
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join(" ");
        let line = line.trim().to_string();
        if !is_noise_line(&line) {
            kept.push(line);
        }
    }
    let joined = kept.join("\n");
    let mut out = String::with_capacity(joined.len());
    let mut newlines = 0;
    for c in joined.chars() {
        if c == '\n' {
            newlines += 1;
            if newlines <= 2 {
                out.push(c);
            }
        } else {
            newlines = 0;
            out.push(c);
        }
    }
    out.trim_matches('\n').to_string()
}

/// Tokenizer-free estimate: one token per four characters, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBudget {
    pub max_tokens: usize,
}

impl TokenBudget {
    pub fn new(max_tokens: usize) -> Option<Self> {
        (max_tokens >= 1).then_some(Self { max_tokens })
    }

    /// Paper-text allowance for a chat model, leaving room for the prompt
    /// scaffolding and the answer.
    pub fn for_model(model_id: &str) -> Self {
        let m = model_id.to_ascii_lowercase();
        let max_tokens = if m.starts_with("gpt-3.5") {
            12_000
        } else if m.starts_with("gpt-4o") || m.starts_with("gpt-4.1") {
            100_000
        } else {
            12_000
        };
        Self { max_tokens }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartKind {
    Whole,
    Start,
    End,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPart {
    pub kind: PartKind,
    /// Byte range within the curated text.
    pub start: usize,
    pub end: usize,
    pub text: String,
}

fn char_boundary_after_chars(text: &str, chars: usize) -> usize {
    text.char_indices().nth(chars).map_or(text.len(), |(i, _)| i)
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Byte positions where a prefix may end: right after sentence-final
/// punctuation followed by whitespace, or right before a blank line.
fn prefix_cuts(text: &str) -> Vec<usize> {
    let mut cuts = Vec::new();
    let mut prev: Option<char> = None;
    for (i, c) in text.char_indices() {
        let after_sentence = c.is_whitespace() && prev.is_some_and(is_terminal);
        let before_blank = text[i..].starts_with("\n\n") && i > 0 && prev != Some('\n');
        if after_sentence || before_blank {
            cuts.push(i);
        }
        prev = Some(c);
    }
    cuts.dedup();
    cuts
}

/// Byte positions where a suffix may begin: the first non-whitespace character
/// after a sentence end or a blank line.
fn suffix_starts(text: &str) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut ws_run_start: Option<usize> = None;
    let mut before_run: Option<char> = None;
    let mut prev: Option<char> = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if ws_run_start.is_none() {
                ws_run_start = Some(i);
                before_run = prev;
            }
        } else if let Some(run) = ws_run_start.take() {
            let blank_line = text[run..i].matches('\n').count() >= 2;
            if blank_line || before_run.is_some_and(is_terminal) {
                starts.push(i);
            }
        }
        prev = Some(c);
    }
    starts
}

/// Splits text that exceeds the budget into a start and an end part.
///
/// Each part is the longest prefix (suffix) within budget that ends (begins)
/// at a sentence or paragraph boundary, falling back to a hard character cut
/// when no boundary fits.
pub fn split_for_budget(text: &str, budget: TokenBudget) -> Vec<TextPart> {
    if estimate_tokens(text) <= budget.max_tokens {
        return vec![TextPart {
            kind: PartKind::Whole,
            start: 0,
            end: text.len(),
            text: text.to_string(),
        }];
    }
    let max_chars = budget.max_tokens.saturating_mul(4);
    let total_chars = text.chars().count();

    let hard_prefix = char_boundary_after_chars(text, max_chars);
    let prefix_end = prefix_cuts(text)
        .into_iter()
        .filter(|&p| p > 0 && p <= hard_prefix)
        .max()
        .unwrap_or(hard_prefix);

    let hard_suffix = char_boundary_after_chars(text, total_chars - max_chars);
    let suffix_start = suffix_starts(text)
        .into_iter()
        .filter(|&q| q >= hard_suffix && q < text.len())
        .min()
        .unwrap_or(hard_suffix);

    vec![
        TextPart {
            kind: PartKind::Start,
            start: 0,
            end: prefix_end,
            text: text[..prefix_end].to_string(),
        },
        TextPart {
            kind: PartKind::End,
            start: suffix_start,
            end: text.len(),
            text: text[suffix_start..].to_string(),
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaperDocument {
    pub article_id: String,
    pub raw_text: String,
    pub curated_text: String,
    pub parts: Vec<TextPart>,
}

impl PaperDocument {
    /// Strip references, clean, and split to the budget.
    pub fn curate(article_id: impl Into<String>, raw_text: impl Into<String>, budget: TokenBudget) -> Self {
        let raw_text = raw_text.into();
        let curated_text = clean_text(strip_references(&raw_text));
        let parts = split_for_budget(&curated_text, budget);
        Self {
            article_id: article_id.into(),
            raw_text,
            curated_text,
            parts,
        }
    }

    /// Both parts in one paper-text slot, each under its own label.
    pub fn paper_text_slot(&self) -> String {
        match self.parts.as_slice() {
            [start, end] => format!(
                "[PART 1 — START]\n{}\n\n[PART 2 — END]\n{}",
                start.text, end.text
            ),
            _ => self.curated_text.clone(),
        }
    }
}
