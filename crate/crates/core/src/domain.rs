//! Shared vocabulary types. Nothing in here performs I/O.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Sentence an agent emits when the supplied literature lacks the requested facts.
pub const NEGATIVE_SENTINEL: &str =
    "The literature provided does not contain the requested information, for the microbial species specified.";

/// Role statement sent as the system message for every completion.
pub const ROLE_MESSAGE: &str = "You are a helpful assistant.";

/// Per-field placeholder for absent evidence.
pub const NAN_TOKEN: &str = "nan";

/// Field labels of the answer format, in emission order.
pub const FIELD_LABELS: [&str; 4] = [
    "reported protein % dry mass:",
    "trophic mechanism:",
    "reported substrate:",
    "substrate class:",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("genus must not be empty")]
    EmptyGenus,
    #[error("species must not be empty")]
    EmptySpecies,
    #[error("max_papers must be at least 1")]
    ZeroMaxPapers,
    #[error("'{0}' does not name a genus and species")]
    Unparseable(String),
    #[error("temperature {0} outside [0.0, 2.0]")]
    Temperature(f64),
    #[error("checkpoint_epoch must be set exactly when strategy is fine_tuned_checkpoint")]
    CheckpointMismatch,
    #[error("field '{0}' is empty")]
    EmptyField(&'static str),
    #[error("an all-nan record must be represented as the negative sentinel")]
    AllNan,
}

/// The organism a search or extraction targets.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StrainQuery {
    genus: String,
    species: String,
    strain_designation: Option<String>,
    max_papers: u32,
}

impl StrainQuery {
    pub fn new(
        genus: &str,
        species: &str,
        strain_designation: Option<&str>,
        max_papers: u32,
    ) -> Result<Self, DomainError> {
        let genus = collapse_ws(genus);
        let species = collapse_ws(species);
        if genus.is_empty() {
            return Err(DomainError::EmptyGenus);
        }
        if species.is_empty() {
            return Err(DomainError::EmptySpecies);
        }
        if max_papers == 0 {
            return Err(DomainError::ZeroMaxPapers);
        }
        let strain_designation = strain_designation
            .map(collapse_ws)
            .filter(|s| !s.is_empty());
        Ok(Self {
            genus,
            species,
            strain_designation,
            max_papers,
        })
    }

    /// Parses "Genus species [strain ...]": first token is the genus, second the
    /// species, anything after is the strain designation.
    pub fn parse(text: &str, max_papers: u32) -> Result<Self, DomainError> {
        let mut tokens = text.split_whitespace();
        let (Some(genus), Some(species)) = (tokens.next(), tokens.next()) else {
            return Err(DomainError::Unparseable(text.to_string()));
        };
        let rest: Vec<&str> = tokens.collect();
        let strain = (!rest.is_empty()).then(|| rest.join(" "));
        Self::new(genus, species, strain.as_deref(), max_papers)
    }

    pub fn genus(&self) -> &str {
        &self.genus
    }

    pub fn species(&self) -> &str {
        &self.species
    }

    pub fn strain_designation(&self) -> Option<&str> {
        self.strain_designation.as_deref()
    }

    pub fn max_papers(&self) -> u32 {
        self.max_papers
    }

    /// "genus species", without the strain designation.
    pub fn binomial(&self) -> String {
        format!("{} {}", self.genus, self.species)
    }

    pub fn display_form(&self) -> String {
        match &self.strain_designation {
            Some(s) => format!("{} {} {}", self.genus, self.species, s),
            None => self.binomial(),
        }
    }
}

impl fmt::Display for StrainQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.display_form())
    }
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// The four canonical fields. Each value is either verbatim text or [`NAN_TOKEN`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExtractionRecord {
    pub protein_pct_dry_mass: String,
    pub trophic_mechanism: String,
    pub reported_substrate: String,
    pub substrate_class: String,
}

impl ExtractionRecord {
    pub fn new(
        protein_pct_dry_mass: impl Into<String>,
        trophic_mechanism: impl Into<String>,
        reported_substrate: impl Into<String>,
        substrate_class: impl Into<String>,
    ) -> Result<Self, DomainError> {
        let record = Self {
            protein_pct_dry_mass: protein_pct_dry_mass.into(),
            trophic_mechanism: trophic_mechanism.into(),
            reported_substrate: reported_substrate.into(),
            substrate_class: substrate_class.into(),
        };
        record.validate()?;
        Ok(record)
    }

    pub fn fields(&self) -> [&str; 4] {
        [
            &self.protein_pct_dry_mass,
            &self.trophic_mechanism,
            &self.reported_substrate,
            &self.substrate_class,
        ]
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        const NAMES: [&str; 4] = [
            "protein_pct_dry_mass",
            "trophic_mechanism",
            "reported_substrate",
            "substrate_class",
        ];
        for (name, value) in NAMES.iter().zip(self.fields()) {
            if value.trim().is_empty() {
                return Err(DomainError::EmptyField(name));
            }
        }
        if self.fields().iter().all(|v| is_nan(v)) {
            return Err(DomainError::AllNan);
        }
        Ok(())
    }

    /// Renders the record in the answer format requested from the model.
    pub fn render(&self) -> String {
        format!(
            "{} {}, {} {}, {} {}, {} {}",
            FIELD_LABELS[0],
            self.protein_pct_dry_mass,
            FIELD_LABELS[1],
            self.trophic_mechanism,
            FIELD_LABELS[2],
            self.reported_substrate,
            FIELD_LABELS[3],
            self.substrate_class
        )
    }
}

pub fn is_nan(value: &str) -> bool {
    value.trim().eq_ignore_ascii_case(NAN_TOKEN)
}

/// Result of one extraction: either a record or the negative sentinel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ExtractionOutcome {
    Record(ExtractionRecord),
    Negative,
}

impl ExtractionOutcome {
    pub fn render(&self) -> String {
        match self {
            Self::Record(r) => r.render(),
            Self::Negative => NEGATIVE_SENTINEL.to_string(),
        }
    }

    pub fn record(&self) -> Option<&ExtractionRecord> {
        match self {
            Self::Record(r) => Some(r),
            Self::Negative => None,
        }
    }

    pub fn is_negative(&self) -> bool {
        matches!(self, Self::Negative)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum OutcomeRepr {
    Negative { negative: bool },
    Record(ExtractionRecord),
}

impl Serialize for ExtractionOutcome {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Self::Record(r) => r.serialize(serializer),
            Self::Negative => OutcomeRepr::Negative { negative: true }.serialize(serializer),
        }
    }
}

impl<'de> Deserialize<'de> for ExtractionOutcome {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        match OutcomeRepr::deserialize(deserializer)? {
            OutcomeRepr::Negative { negative: true } => Ok(Self::Negative),
            OutcomeRepr::Negative { negative: false } => Err(serde::de::Error::custom(
                "\"negative\": false is not a valid outcome",
            )),
            OutcomeRepr::Record(r) => r
                .validate()
                .map(|_| Self::Record(r))
                .map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("completion is neither the negative sentinel nor a complete answer; missing labels: {missing:?}")]
pub struct ParseError {
    pub missing: Vec<&'static str>,
}

/// Parses a completion into a record or the negative sentinel.
///
/// Labels are located case-insensitively in answer order; each value runs up
/// to the next label, so values may contain commas. An answer whose four
/// fields are all "nan" is reported as [`ExtractionOutcome::Negative`].
pub fn parse_extraction_output(raw: &str) -> Result<ExtractionOutcome, ParseError> {
    let trimmed = raw.trim();
    if trimmed == NEGATIVE_SENTINEL {
        return Ok(ExtractionOutcome::Negative);
    }
    // ASCII lowercasing keeps byte offsets aligned with `trimmed`.
    let lower = trimmed.to_ascii_lowercase();
    let mut spans: [Option<(usize, usize)>; 4] = [None; 4];
    let mut cursor = 0;
    for (i, label) in FIELD_LABELS.iter().enumerate() {
        if let Some(off) = lower[cursor..].find(label) {
            let start = cursor + off;
            spans[i] = Some((start, start + label.len()));
            cursor = start + label.len();
        }
    }
    let missing: Vec<&'static str> = FIELD_LABELS
        .iter()
        .zip(spans.iter())
        .filter(|(_, s)| s.is_none())
        .map(|(l, _)| *l)
        .collect();
    if !missing.is_empty() {
        return Err(ParseError { missing });
    }
    let spans: Vec<(usize, usize)> = spans.iter().map(|s| s.unwrap()).collect();
    let mut values = Vec::with_capacity(4);
    for i in 0..4 {
        let end = spans.get(i + 1).map_or(trimmed.len(), |s| s.0);
        values.push(clean_value(&trimmed[spans[i].1..end]));
    }
    let record = ExtractionRecord {
        protein_pct_dry_mass: values[0].clone(),
        trophic_mechanism: values[1].clone(),
        reported_substrate: values[2].clone(),
        substrate_class: values[3].clone(),
    };
    if record.fields().iter().all(|v| is_nan(v)) {
        return Ok(ExtractionOutcome::Negative);
    }
    Ok(ExtractionOutcome::Record(record))
}

fn clean_value(raw: &str) -> String {
    let v = raw
        .trim()
        .trim_end_matches(|c: char| matches!(c, ',' | ';' | '.') || c.is_whitespace())
        .trim();
    if v.is_empty() || is_nan(v) {
        NAN_TOKEN.to_string()
    } else {
        v.to_string()
    }
}

/// How an agent variant produces its answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    SingleStageBase,
    TwoStagePrompted,
    FineTunedCheckpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentVariant {
    pub model_id: String,
    pub strategy: Strategy,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_epoch: Option<u32>,
}

impl AgentVariant {
    pub fn new(
        model_id: impl Into<String>,
        strategy: Strategy,
        temperature: f64,
        checkpoint_epoch: Option<u32>,
    ) -> Result<Self, DomainError> {
        let v = Self {
            model_id: model_id.into(),
            strategy,
            temperature,
            checkpoint_epoch,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(DomainError::Temperature(self.temperature));
        }
        let is_ft = self.strategy == Strategy::FineTunedCheckpoint;
        if is_ft != self.checkpoint_epoch.is_some() {
            return Err(DomainError::CheckpointMismatch);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Strategy;
    use proptest::strategy::Strategy as _;
    use proptest::prelude::*;

    fn rec(a: &str, b: &str, c: &str, d: &str) -> ExtractionRecord {
        ExtractionRecord::new(a, b, c, d).unwrap()
    }

    #[test]
    fn sentinel_parses_to_negative() {
        assert_eq!(
            parse_extraction_output(NEGATIVE_SENTINEL).unwrap(),
            ExtractionOutcome::Negative
        );
        let padded = format!("  \n{NEGATIVE_SENTINEL}\n ");
        assert!(parse_extraction_output(&padded).unwrap().is_negative());
    }

    #[test]
    fn near_miss_sentinel_is_a_parse_error() {
        let drifted = NEGATIVE_SENTINEL.trim_end_matches('.');
        let err = parse_extraction_output(drifted).unwrap_err();
        assert_eq!(err.missing.len(), 4);
    }

    #[test]
    fn parses_the_answer_format() {
        let out = parse_extraction_output(
            "reported protein % dry mass: 45, trophic mechanism: heterotrophic, reported substrate: glucose, substrate class: sugar",
        )
        .unwrap();
        assert_eq!(
            out,
            ExtractionOutcome::Record(rec("45", "heterotrophic", "glucose", "sugar"))
        );
    }

    #[test]
    fn labels_are_case_insensitive_and_values_keep_commas() {
        let out = parse_extraction_output(
            "Reported Protein % Dry Mass: 30-50 %, Trophic Mechanism: heterotrophic; REPORTED SUBSTRATE: glucose, xylose, Substrate Class: sugar.",
        )
        .unwrap();
        assert_eq!(
            out,
            ExtractionOutcome::Record(rec("30-50 %", "heterotrophic", "glucose, xylose", "sugar"))
        );
    }

    #[test]
    fn under_labelled_input_lists_missing_labels() {
        let err = parse_extraction_output("trophic mechanism: unknown").unwrap_err();
        assert_eq!(
            err.missing,
            vec![FIELD_LABELS[0], FIELD_LABELS[2], FIELD_LABELS[3]]
        );
    }

    #[test]
    fn all_nan_answer_becomes_negative() {
        let out = parse_extraction_output(
            "reported protein % dry mass: nan, trophic mechanism: NaN, reported substrate: nan, substrate class: nan",
        )
        .unwrap();
        assert!(out.is_negative());
    }

    #[test]
    fn render_matches_the_answer_format() {
        assert_eq!(
            rec("45", "heterotrophic", "glucose", "sugar").render(),
            "reported protein % dry mass: 45, trophic mechanism: heterotrophic, reported substrate: glucose, substrate class: sugar"
        );
        assert_eq!(
            rec("nan", "nan", "nan", "sugar").render(),
            "reported protein % dry mass: nan, trophic mechanism: nan, reported substrate: nan, substrate class: sugar"
        );
    }

    #[test]
    fn all_nan_record_is_rejected() {
        assert_eq!(
            ExtractionRecord::new("nan", "nan", "nan", "nan").unwrap_err(),
            DomainError::AllNan
        );
    }

    #[test]
    fn outcome_json_shapes() {
        let r = ExtractionOutcome::Record(rec("45", "heterotrophic", "glucose", "sugar"));
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"protein_pct_dry_mass":"45","trophic_mechanism":"heterotrophic","reported_substrate":"glucose","substrate_class":"sugar"}"#
        );
        assert_eq!(
            serde_json::to_string(&ExtractionOutcome::Negative).unwrap(),
            r#"{"negative":true}"#
        );
        let back: ExtractionOutcome = serde_json::from_str(r#"{"negative":true}"#).unwrap();
        assert!(back.is_negative());
        let back: ExtractionOutcome = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn strain_query_display_and_validation() {
        let q = StrainQuery::parse("  Bacillus   subtilis 168 ", 5).unwrap();
        assert_eq!(q.display_form(), "Bacillus subtilis 168");
        assert_eq!(q.binomial(), "Bacillus subtilis");
        assert_eq!(q.strain_designation(), Some("168"));
        assert_eq!(StrainQuery::parse("Fusarium", 5), Err(DomainError::Unparseable("Fusarium".into())));
        assert_eq!(StrainQuery::new(" ", "x", None, 1), Err(DomainError::EmptyGenus));
        assert_eq!(StrainQuery::new("a", "x", None, 0), Err(DomainError::ZeroMaxPapers));
        assert_eq!(StrainQuery::new("a", "x", Some("  "), 1).unwrap().display_form(), "a x");
    }

    #[test]
    fn variant_invariants() {
        assert!(AgentVariant::new("m", Strategy::FineTunedCheckpoint, 0.0, Some(9)).is_ok());
        assert_eq!(
            AgentVariant::new("m", Strategy::FineTunedCheckpoint, 0.0, None),
            Err(DomainError::CheckpointMismatch)
        );
        assert_eq!(
            AgentVariant::new("m", Strategy::TwoStagePrompted, 0.0, Some(1)),
            Err(DomainError::CheckpointMismatch)
        );
        assert!(AgentVariant::new("m", Strategy::SingleStageBase, -0.1, None).is_err());
    }

    fn field_value() -> impl proptest::strategy::Strategy<Value = String> {
        // No label text, no trailing punctuation, no outer whitespace.
        "[A-Za-z0-9][A-Za-z0-9 ,%()/-]{0,20}[A-Za-z0-9%)]"
            .prop_filter("not nan", |s| !is_nan(s))
            .prop_map(|s| s.split_whitespace().collect::<Vec<_>>().join(" "))
    }

    fn maybe_nan() -> impl proptest::strategy::Strategy<Value = String> {
        prop_oneof![3 => field_value(), 1 => Just(NAN_TOKEN.to_string())]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn parse_inverts_render(a in maybe_nan(), b in maybe_nan(), c in maybe_nan(), d in field_value()) {
            let r = ExtractionRecord::new(a, b, c, d).unwrap();
            prop_assert_eq!(parse_extraction_output(&r.render()).unwrap(), ExtractionOutcome::Record(r));
        }

        #[test]
        fn parse_is_total(raw in ".{0,200}") {
            // Exactly one of record, sentinel or error; never panics.
            let _ = parse_extraction_output(&raw);
        }
    }
}
