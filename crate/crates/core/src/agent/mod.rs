//! The information extraction agent: prompt construction, the chat backend
//! abstraction, and the single-stage and two-stage extraction flows.

mod backend;
mod prompt;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::document::PaperDocument;
use crate::domain::{parse_extraction_output, AgentVariant, ExtractionOutcome, ParseError, Strategy, StrainQuery};

pub use backend::{
    parse_chat_completion, BackendError, ChatBackend, ChatRequest, MockChatBackend, MockFixtures, MockRule,
    OpenAiChatBackend, ScriptedChatBackend, DEFAULT_LLM_BASE_URL,
};
pub use prompt::{
    build_canonical_prompt, build_harvest_prompt, build_single_stage_prompt, early_exit_gate, fill_template,
    is_no_content, parse_field_blocks, FieldBlocks, GateConfig, GateDecision, GateVerdict, Prompt, BLOCK_LABELS,
    CANONICAL_TEMPLATE, HARVEST_TEMPLATE, NEGATIVE_EXAMPLE, NO_CONTENT_SENTINEL, PART_SEPARATOR, POSITIVE_EXAMPLE,
    PROMPT_ASSET_VERSION, SINGLE_STAGE_TEMPLATE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    SingleStage,
    Harvest,
    Canonical,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::SingleStage => "single-stage",
            Stage::Harvest => "harvest",
            Stage::Canonical => "canonical",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("{stage} call failed: {source}")]
    Backend { stage: Stage, source: BackendError },
    #[error("{stage} output could not be parsed: {source}")]
    ExtractionFailure { stage: Stage, source: ParseError },
    #[error("variant strategy {0:?} does not match this flow")]
    WrongStrategy(Strategy),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub gate: GateConfig,
    pub max_in_flight: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gate: GateConfig::default(),
            max_in_flight: 4,
        }
    }
}

/// Result of one document plus what it cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRun {
    pub outcome: ExtractionOutcome,
    pub backend_calls: usize,
    pub gate: Option<GateDecision>,
}

async fn call(
    backend: &dyn ChatBackend,
    prompt: Prompt,
    variant: &AgentVariant,
    stage: Stage,
) -> Result<String, AgentError> {
    let req = ChatRequest {
        system: prompt.system,
        user: prompt.user,
        model: variant.model_id.clone(),
        temperature: variant.temperature,
    };
    backend
        .complete(&req)
        .await
        .map_err(|source| AgentError::Backend { stage, source })
}

/// One completion per document part with the fixed template. The first part
/// yielding a record wins; only when no part yields a record does a parse
/// failure surface.
pub async fn run_single_stage(
    q: &StrainQuery,
    doc: &PaperDocument,
    backend: &dyn ChatBackend,
    variant: &AgentVariant,
) -> Result<AgentRun, AgentError> {
    if variant.strategy == Strategy::TwoStagePrompted {
        return Err(AgentError::WrongStrategy(variant.strategy));
    }
    let mut record = None;
    let mut failure = None;
    for part in &doc.parts {
        let raw = call(backend, build_single_stage_prompt(q, &part.text), variant, Stage::SingleStage).await?;
        match parse_extraction_output(&raw) {
            Ok(ExtractionOutcome::Record(r)) => {
                record.get_or_insert(r);
            }
            Ok(ExtractionOutcome::Negative) => {}
            Err(e) => {
                failure.get_or_insert(e);
            }
        }
    }
    let outcome = match (record, failure) {
        (Some(r), _) => ExtractionOutcome::Record(r),
        (None, Some(source)) => {
            return Err(AgentError::ExtractionFailure {
                stage: Stage::SingleStage,
                source,
            })
        }
        (None, None) => ExtractionOutcome::Negative,
    };
    Ok(AgentRun {
        outcome,
        backend_calls: doc.parts.len(),
        gate: None,
    })
}

/// Harvest per part, merge, gate, then one canonical-extraction call.
pub async fn run_two_stage(
    q: &StrainQuery,
    doc: &PaperDocument,
    backend: &dyn ChatBackend,
    variant: &AgentVariant,
    gate_cfg: GateConfig,
) -> Result<AgentRun, AgentError> {
    if variant.strategy != Strategy::TwoStagePrompted {
        return Err(AgentError::WrongStrategy(variant.strategy));
    }
    let mut harvested = Vec::with_capacity(doc.parts.len());
    for part in &doc.parts {
        let raw = call(backend, build_harvest_prompt(q, &part.text), variant, Stage::Harvest).await?;
        harvested.push(parse_field_blocks(&raw));
    }
    let merged = FieldBlocks::merge(&harvested);
    let gate = early_exit_gate(&merged, gate_cfg);
    let mut backend_calls = doc.parts.len();
    let outcome = match gate.verdict {
        GateVerdict::HaltNegative => ExtractionOutcome::Negative,
        GateVerdict::Proceed => {
            backend_calls += 1;
            let raw = call(backend, build_canonical_prompt(q, &merged), variant, Stage::Canonical).await?;
            parse_extraction_output(&raw).map_err(|source| AgentError::ExtractionFailure {
                stage: Stage::Canonical,
                source,
            })?
        }
    };
    Ok(AgentRun {
        outcome,
        backend_calls,
        gate: Some(gate),
    })
}

/// Dispatches on the variant's strategy.
pub async fn run_variant(
    q: &StrainQuery,
    doc: &PaperDocument,
    backend: &dyn ChatBackend,
    variant: &AgentVariant,
    cfg: &AgentConfig,
) -> Result<AgentRun, AgentError> {
    match variant.strategy {
        Strategy::TwoStagePrompted => run_two_stage(q, doc, backend, variant, cfg.gate).await,
        Strategy::SingleStageBase | Strategy::FineTunedCheckpoint => run_single_stage(q, doc, backend, variant).await,
    }
}

/// Runs many documents with at most `cfg.max_in_flight` in progress; results
/// keep input order.
pub async fn run_many(
    q: &StrainQuery,
    docs: &[PaperDocument],
    backend: &dyn ChatBackend,
    variant: &AgentVariant,
    cfg: &AgentConfig,
) -> Vec<Result<AgentRun, AgentError>> {
    stream::iter(0..docs.len())
        .map(|i| run_variant(q, &docs[i], backend, variant, cfg))
        .buffered(cfg.max_in_flight.max(1))
        .collect()
        .await
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::document::TokenBudget;
    use crate::domain::NEGATIVE_SENTINEL;

    const RECORD: &str = "reported protein % dry mass: 45, trophic mechanism: heterotrophic, reported substrate: glucose, substrate class: sugar";

    fn q() -> StrainQuery {
        StrainQuery::parse("Fusarium venenatum A3/5", 5).unwrap()
    }

    fn one_part() -> PaperDocument {
        PaperDocument::curate("1", "Some paper body.", TokenBudget::new(1000).unwrap())
    }

    fn two_parts() -> PaperDocument {
        let d = PaperDocument::curate("2", "First half sentence. Second half sentence.", TokenBudget::new(6).unwrap());
        assert_eq!(d.parts.len(), 2);
        d
    }

    fn variant(s: Strategy) -> AgentVariant {
        let epoch = (s == Strategy::FineTunedCheckpoint).then_some(10);
        AgentVariant::new("gpt-4o", s, 0.0, epoch).unwrap()
    }

    fn ample() -> String {
        FieldBlocks::from_array(std::array::from_fn(|i| format!("evidence sentence number {i} with enough words")))
            .render()
    }

    #[tokio::test]
    async fn single_stage_paths() {
        let b = ScriptedChatBackend::new([RECORD]);
        let run = run_single_stage(&q(), &one_part(), &b, &variant(Strategy::SingleStageBase)).await.unwrap();
        assert!(run.outcome.record().is_some());
        assert_eq!((run.backend_calls, b.calls()), (1, 1));
        let req = &b.requests()[0];
        assert_eq!(req.system, "You are a helpful assistant.");
        assert!(req.user.contains("Fusarium venenatum A3/5"));

        let b = ScriptedChatBackend::new([NEGATIVE_SENTINEL, RECORD]);
        let run = run_single_stage(&q(), &two_parts(), &b, &variant(Strategy::FineTunedCheckpoint)).await.unwrap();
        assert!(run.outcome.record().is_some());
        assert_eq!(b.calls(), 2);

        let b = ScriptedChatBackend::new([NEGATIVE_SENTINEL, NEGATIVE_SENTINEL]);
        let run = run_single_stage(&q(), &two_parts(), &b, &variant(Strategy::SingleStageBase)).await.unwrap();
        assert!(run.outcome.is_negative());
    }

    #[tokio::test]
    async fn single_stage_parse_failure_surfaces() {
        let b = ScriptedChatBackend::new(["trophic mechanism: unknown"]);
        let err = run_single_stage(&q(), &one_part(), &b, &variant(Strategy::SingleStageBase)).await.unwrap_err();
        assert!(matches!(err, AgentError::ExtractionFailure { stage: Stage::SingleStage, .. }));
    }

    #[tokio::test]
    async fn two_stage_halts_on_sparse_harvest() {
        let b = ScriptedChatBackend::new([FieldBlocks::default().render()]);
        let run = run_two_stage(&q(), &one_part(), &b, &variant(Strategy::TwoStagePrompted), GateConfig::default())
            .await
            .unwrap();
        assert!(run.outcome.is_negative());
        assert_eq!((run.backend_calls, b.calls()), (1, 1));
        assert_eq!(run.gate.unwrap().verdict, GateVerdict::HaltNegative);
    }

    #[tokio::test]
    async fn two_stage_proceeds() {
        let b = ScriptedChatBackend::new([ample(), RECORD.to_string()]);
        let run = run_two_stage(&q(), &one_part(), &b, &variant(Strategy::TwoStagePrompted), GateConfig::default())
            .await
            .unwrap();
        assert_eq!(run.outcome.render(), RECORD);
        assert_eq!(b.calls(), 2);
        assert!(b.requests()[1].user.contains("evidence sentence number 3"));

        let b = ScriptedChatBackend::new([ample(), FieldBlocks::default().render(), RECORD.to_string()]);
        let run = run_two_stage(&q(), &two_parts(), &b, &variant(Strategy::TwoStagePrompted), GateConfig::default())
            .await
            .unwrap();
        assert_eq!((run.backend_calls, b.calls()), (3, 3));
    }

    #[tokio::test]
    async fn two_stage_errors_carry_stage() {
        let b = ScriptedChatBackend::with_results([Err(BackendError::RateLimited)]);
        let err = run_two_stage(&q(), &one_part(), &b, &variant(Strategy::TwoStagePrompted), GateConfig::default())
            .await
            .unwrap_err();
        assert!(matches!(err, AgentError::Backend { stage: Stage::Harvest, .. }));

        let b = ScriptedChatBackend::new([ample(), "garbage".to_string()]);
        let err = run_two_stage(&q(), &one_part(), &b, &variant(Strategy::TwoStagePrompted), GateConfig::default())
            .await
            .unwrap_err();
        assert!(matches!(err, AgentError::ExtractionFailure { stage: Stage::Canonical, .. }));
    }

    #[tokio::test]
    async fn strategy_is_checked() {
        let b = ScriptedChatBackend::new(Vec::<String>::new());
        assert!(run_two_stage(&q(), &one_part(), &b, &variant(Strategy::SingleStageBase), GateConfig::default())
            .await
            .is_err());
        assert!(run_single_stage(&q(), &one_part(), &b, &variant(Strategy::TwoStagePrompted)).await.is_err());
        assert_eq!(b.calls(), 0);
    }

    #[tokio::test]
    async fn run_many_keeps_order() {
        let mock = MockChatBackend::new(MockFixtures {
            rules: vec![MockRule {
                contains: "paper two".into(),
                completion: RECORD.into(),
            }],
            default: Some(NEGATIVE_SENTINEL.into()),
            ..Default::default()
        });
        let b = TokenBudget::new(1000).unwrap();
        let docs: Vec<_> = ["paper one", "paper two", "paper three"]
            .iter()
            .enumerate()
            .map(|(i, t)| PaperDocument::curate(i.to_string(), *t, b))
            .collect();
        let runs = run_many(&q(), &docs, &mock, &variant(Strategy::SingleStageBase), &AgentConfig::default()).await;
        let negs: Vec<bool> = runs.iter().map(|r| r.as_ref().unwrap().outcome.is_negative()).collect();
        assert_eq!(negs, [true, false, true]);
    }
}
