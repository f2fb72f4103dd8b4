use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::domain::{StrainQuery, ROLE_MESSAGE};

/// Bumped whenever any prompt asset changes.
pub const PROMPT_ASSET_VERSION: &str = "1";

pub const SINGLE_STAGE_TEMPLATE: &str = include_str!("../../assets/prompts/single_stage.txt");
pub const HARVEST_TEMPLATE: &str = include_str!("../../assets/prompts/harvest.txt");
pub const CANONICAL_TEMPLATE: &str = include_str!("../../assets/prompts/canonical.txt");
pub const POSITIVE_EXAMPLE: &str = include_str!("../../assets/prompts/positive_example.txt");
pub const NEGATIVE_EXAMPLE: &str = include_str!("../../assets/prompts/negative_example.txt");

pub const NO_CONTENT_SENTINEL: &str = "No relevant content found";

/// Stage-1 block labels in output order.
pub const BLOCK_LABELS: [&str; 4] = [
    "PROTEIN % DRY MASS",
    "TROPHIC MECHANISM",
    "REPORTED SUBSTRATE",
    "SUBSTRATE CLASS",
];

/// Line placed between contributions of different document parts when
/// stage-1 blocks are merged.
pub const PART_SEPARATOR: &str = "-----";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

/// Substitutes `{name}` placeholders in one pass, so placeholder-like text
/// inside substituted values is never expanded again.
pub fn fill_template(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + values.iter().map(|v| v.1.len()).sum::<usize>());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            values.iter().find(|(k, _)| *k == name).map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn build_single_stage_prompt(q: &StrainQuery, paper_text: &str) -> Prompt {
    let species = q.display_form();
    Prompt {
        system: ROLE_MESSAGE.to_string(),
        user: fill_template(
            SINGLE_STAGE_TEMPLATE,
            &[("species_name", &species), ("paper_text", paper_text)],
        ),
    }
}

pub fn build_harvest_prompt(q: &StrainQuery, paper_text: &str) -> Prompt {
    let species = q.display_form();
    Prompt {
        system: ROLE_MESSAGE.to_string(),
        user: fill_template(
            HARVEST_TEMPLATE,
            &[("species_name", &species), ("paper_text", paper_text)],
        ),
    }
}

pub fn build_canonical_prompt(q: &StrainQuery, fb: &FieldBlocks) -> Prompt {
    let species = q.display_form();
    Prompt {
        system: ROLE_MESSAGE.to_string(),
        user: fill_template(
            CANONICAL_TEMPLATE,
            &[
                ("species_name", &species),
                ("positive_example", POSITIVE_EXAMPLE),
                ("negative_example", NEGATIVE_EXAMPLE),
                ("protein_block", &fb.protein_block),
                ("trophic_block", &fb.trophic_block),
                ("substrate_block", &fb.substrate_block),
                ("substrate_class_block", &fb.substrate_class_block),
            ],
        ),
    }
}

/// Stage-1 output: harvested context per field, or the no-content sentinel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldBlocks {
    pub protein_block: String,
    pub trophic_block: String,
    pub substrate_block: String,
    pub substrate_class_block: String,
}

impl Default for FieldBlocks {
    fn default() -> Self {
        Self::from_array([NO_CONTENT_SENTINEL; 4].map(String::from))
    }
}

pub fn is_no_content(block: &str) -> bool {
    let t = block.trim().trim_end_matches('.').trim();
    t.is_empty() || t.eq_ignore_ascii_case(NO_CONTENT_SENTINEL)
}

impl FieldBlocks {
    pub fn from_array(blocks: [String; 4]) -> Self {
        let [protein_block, trophic_block, substrate_block, substrate_class_block] = blocks;
        Self {
            protein_block,
            trophic_block,
            substrate_block,
            substrate_class_block,
        }
    }

    pub fn blocks(&self) -> [&str; 4] {
        [
            &self.protein_block,
            &self.trophic_block,
            &self.substrate_block,
            &self.substrate_class_block,
        ]
    }

    pub fn sentinel_count(&self) -> usize {
        self.blocks().iter().filter(|b| is_no_content(b)).count()
    }

    /// Characters of harvested evidence, ignoring sentinel blocks.
    pub fn harvested_chars(&self) -> usize {
        self.blocks()
            .iter()
            .filter(|b| !is_no_content(b))
            .map(|b| b.chars().count())
            .sum()
    }

    /// Renders in the stage-1 output format.
    pub fn render(&self) -> String {
        BLOCK_LABELS
            .iter()
            .zip(self.blocks())
            .map(|(label, block)| format!("=== {label} ===\n{block}"))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Per field, joins the non-sentinel content of every part with a
    /// separator line; fields with no content anywhere stay sentinel.
    pub fn merge(parts: &[FieldBlocks]) -> FieldBlocks {
        let merged = std::array::from_fn(|i| {
            let found: Vec<&str> = parts
                .iter()
                .map(|p| p.blocks()[i])
                .filter(|b| !is_no_content(b))
                .collect();
            if found.is_empty() {
                NO_CONTENT_SENTINEL.to_string()
            } else {
                found.join(&format!("\n{PART_SEPARATOR}\n"))
            }
        });
        FieldBlocks::from_array(merged)
    }
}

static BLOCK_LABEL_LINE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"(?im)^[ \t]*=+[ \t]*(protein % dry mass|trophic mechanism|reported substrate|substrate class)[ \t]*=+[ \t]*$")
        .unwrap()
});

/// Splits a stage-1 completion on the block labels. Missing, empty or
/// sentinel blocks become the exact sentinel; a repeated label keeps its
/// first block.
pub fn parse_field_blocks(raw: &str) -> FieldBlocks {
    let labels: Vec<(usize, usize, usize)> = BLOCK_LABEL_LINE
        .captures_iter(raw)
        .map(|c| {
            let whole = c.get(0).unwrap();
            let name = c[1].to_ascii_uppercase();
            let idx = BLOCK_LABELS.iter().position(|l| *l == name).unwrap();
            (idx, whole.start(), whole.end())
        })
        .collect();
    let mut blocks: [Option<String>; 4] = Default::default();
    for (n, &(idx, _, end)) in labels.iter().enumerate() {
        let stop = labels.get(n + 1).map_or(raw.len(), |next| next.1);
        let content = raw[end..stop].trim();
        if blocks[idx].is_none() {
            blocks[idx] = Some(if is_no_content(content) {
                NO_CONTENT_SENTINEL.to_string()
            } else {
                content.to_string()
            });
        }
    }
    FieldBlocks::from_array(blocks.map(|b| b.unwrap_or_else(|| NO_CONTENT_SENTINEL.to_string())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateVerdict {
    Proceed,
    HaltNegative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateDecision {
    pub verdict: GateVerdict,
    pub sparse_blocks: usize,
    pub harvested_chars: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub min_chars: usize,
    pub max_sparse_blocks: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            min_chars: 80,
            max_sparse_blocks: 3,
        }
    }
}

/// Halts when at least `max_sparse_blocks` blocks are sentinel or the
/// harvested evidence is shorter than `min_chars`.
pub fn early_exit_gate(fb: &FieldBlocks, cfg: GateConfig) -> GateDecision {
    let sparse_blocks = fb.sentinel_count();
    let harvested_chars = fb.harvested_chars();
    let verdict = if sparse_blocks >= cfg.max_sparse_blocks || harvested_chars < cfg.min_chars {
        GateVerdict::HaltNegative
    } else {
        GateVerdict::Proceed
    };
    GateDecision {
        verdict,
        sparse_blocks,
        harvested_chars,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::NEGATIVE_SENTINEL;

    fn fv() -> StrainQuery {
        StrainQuery::parse("Fusarium venenatum", 5).unwrap()
    }

    #[test]
    fn single_stage_matches_template() {
        let p = build_single_stage_prompt(&fv(), "PAPER BODY");
        assert_eq!(p.system, "You are a helpful assistant.");
        assert!(p.user.starts_with("For the genus species Fusarium venenatum, please find"));
        assert!(p.user.contains(r#"concise "reported protein % dry mass: [answer]"#));
        assert!(p.user.contains(NEGATIVE_SENTINEL));
        assert!(p.user.ends_with("following paper(s):\n\nPAPER BODY"));
        assert!(!p.user.contains("{species_name}") && !p.user.contains("{paper_text}"));
    }

    #[test]
    fn placeholders_in_paper_text_survive() {
        let p = build_single_stage_prompt(&fv(), "literal {species_name} here");
        assert!(p.user.ends_with("literal {species_name} here"));
        assert_eq!(fill_template("{a}{b}{", &[("a", "{b}"), ("b", "x")]), "{b}x{");
    }

    #[test]
    fn harvest_prompt_shape() {
        let p = build_harvest_prompt(&fv(), "BODY");
        assert_eq!(p.user.matches(NO_CONTENT_SENTINEL).count(), 1);
        for label in BLOCK_LABELS {
            assert!(p.user.contains(&format!("=== {label} ===")));
        }
        let instruction = p.user.split("\n\n").next().unwrap();
        assert!(instruction.contains("expert microbiologist"));
        assert!(instruction.contains("verbatim"));
        assert!(instruction.contains("Do not summarise"));
        assert!(instruction.contains(NO_CONTENT_SENTINEL));
    }

    #[test]
    fn canonical_prompt_shape() {
        let fb = FieldBlocks::from_array(["P text".into(), "T text".into(), "S text".into(), "C text".into()]);
        let p = build_canonical_prompt(&fv(), &fb);
        assert!(p.user.contains("strain-specific > genus-level"));
        assert!(p.user.contains("answer nan for that field"));
        assert!(p.user.contains("Output only the answer in the schema"));
        assert!(p.user.contains("Positive example") && p.user.contains("Negative example"));
        for b in fb.blocks() {
            assert!(p.user.contains(b));
        }
    }

    #[test]
    fn block_parsing() {
        let raw = "=== PROTEIN % DRY MASS ===\n45% protein\n=== TROPHIC MECHANISM ===\nheterotrophic growth\n=== REPORTED SUBSTRATE ===\nglucose\n=== SUBSTRATE CLASS ===\nsugar\n";
        let fb = parse_field_blocks(raw);
        assert_eq!(fb.blocks(), ["45% protein", "heterotrophic growth", "glucose", "sugar"]);
        assert_eq!(parse_field_blocks(&fb.render()), fb);

        let two = "=== substrate class ===\nsugar\n=== PROTEIN % DRY MASS ===\n45%";
        let fb = parse_field_blocks(two);
        assert_eq!(fb.sentinel_count(), 2);
        assert_eq!(fb.protein_block, "45%");
        assert_eq!(fb.substrate_class_block, "sugar");

        assert_eq!(parse_field_blocks(""), FieldBlocks::default());
        let fb = parse_field_blocks("=== TROPHIC MECHANISM ===\nno relevant content found.\n");
        assert_eq!(fb.trophic_block, NO_CONTENT_SENTINEL);
    }

    #[test]
    fn gate_rules() {
        let cfg = GateConfig::default();
        assert_eq!(early_exit_gate(&FieldBlocks::default(), cfg).verdict, GateVerdict::HaltNegative);
        let ample = FieldBlocks::from_array(std::array::from_fn(|_| "x".repeat(200)));
        let d = early_exit_gate(&ample, cfg);
        assert_eq!(d.verdict, GateVerdict::Proceed);
        assert_eq!(d.harvested_chars, 800);
        let three = FieldBlocks { protein_block: "y".repeat(500), ..FieldBlocks::default() };
        let d = early_exit_gate(&three, cfg);
        assert_eq!((d.verdict, d.sparse_blocks), (GateVerdict::HaltNegative, 3));
        let short = FieldBlocks::from_array(std::array::from_fn(|_| "z".repeat(19)));
        assert_eq!(early_exit_gate(&short, cfg).verdict, GateVerdict::HaltNegative);
    }

    #[test]
    fn merge_across_parts() {
        let a = FieldBlocks::from_array(["p1".into(), NO_CONTENT_SENTINEL.into(), "s1".into(), NO_CONTENT_SENTINEL.into()]);
        let b = FieldBlocks::from_array(["p2".into(), NO_CONTENT_SENTINEL.into(), NO_CONTENT_SENTINEL.into(), NO_CONTENT_SENTINEL.into()]);
        let m = FieldBlocks::merge(&[a, b]);
        assert_eq!(m.protein_block, "p1\n-----\np2");
        assert_eq!(m.trophic_block, NO_CONTENT_SENTINEL);
        assert_eq!(m.substrate_block, "s1");
    }
}
