//! Embedding-based scoring of agent outputs against ideal outputs, summary
//! statistics, temperature sweeps and variant comparison.

mod provider;

use std::collections::{BTreeMap, HashMap};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{ChatBackend, ChatRequest};
use crate::cache::{sha256_hex, KvStore};
use crate::curation::{emit_finetune_jsonl, LabeledExample};
use crate::domain::ROLE_MESSAGE;

pub use provider::{EmbeddingProvider, HashingEmbedder, HttpEmbedder, ProviderError, DEFAULT_PROVIDER_IDS};

pub const SWEEP_TEMPERATURES: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
pub const EMBED_CACHE_NAMESPACE: &str = "embeddings";
pub const DEFAULT_EMBED_IN_FLIGHT: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("vector dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("cannot aggregate an empty score list")]
    EmptyInput,
    #[error("base mean must be positive, got {0}")]
    NonpositiveBase(f64),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("every pair failed; first error: {0}")]
    AllPairsFailed(String),
    #[error("variant '{0}' was scored on a different partition")]
    PartitionMismatch(String),
    #[error("base variant '{0}' not among the reports")]
    MissingBase(String),
    #[error("variant '{variant}' lacks provider '{provider}'")]
    ProviderMismatch { variant: String, provider: String },
}

/// dot(u, v) / (|u| |v|), clamped to [-1, 1].
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, EvalError> {
    if u.len() != v.len() {
        return Err(EvalError::DimensionMismatch(u.len(), v.len()));
    }
    let (mut dot, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    // sqrt(uu * vv) rather than sqrt(uu) * sqrt(vv): exact 1.0 when u == v.
    Ok((dot / (uu * vv).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalAggregate {
    pub provider_id: String,
    pub mean: f64,
    /// Sample standard deviation (n - 1); zero for a single score.
    pub std: f64,
    pub n: usize,
}

pub fn aggregate(provider_id: &str, scores: &[f64]) -> Result<EvalAggregate, EvalError> {
    let n = scores.len();
    let first = *scores.first().ok_or(EvalError::EmptyInput)?;
    let (mean, std) = if scores.iter().all(|s| *s == first) {
        (first, 0.0)
    } else {
        let mean = scores.iter().sum::<f64>() / n as f64;
        let ss: f64 = scores.iter().map(|s| (s - mean).powi(2)).sum();
        (mean, (ss / (n - 1) as f64).sqrt())
    };
    Ok(EvalAggregate {
        provider_id: provider_id.to_string(),
        mean,
        std,
        n,
    })
}

/// 100 * (new - base) / base, rounded half-up to an integer.
pub fn pct_improvement(base_mean: f64, new_mean: f64) -> Result<i64, EvalError> {
    if base_mean.is_nan() || base_mean <= 0.0 {
        return Err(EvalError::NonpositiveBase(base_mean));
    }
    Ok((100.0 * (new_mean - base_mean) / base_mean + 0.5).floor() as i64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub obtained: String,
    pub ideal: String,
    pub score: f64,
}

fn cache_key(provider_id: &str, text: &str) -> String {
    format!("{provider_id}:{}", sha256_hex(text.as_bytes()))
}

/// Embeds through the cache: one provider call per distinct uncached text.
pub async fn embed_cached(
    provider: &dyn EmbeddingProvider,
    cache: &dyn KvStore,
    text: &str,
) -> Result<Vec<f64>, ProviderError> {
    let key = cache_key(provider.provider_id(), text);
    if let Ok(Some(bytes)) = cache.get(EMBED_CACHE_NAMESPACE, &key) {
        if let Ok(v) = serde_json::from_slice::<Vec<f64>>(&bytes) {
            return Ok(v);
        }
    }
    let v = provider.embed(text).await?;
    if let Err(e) = cache.put(EMBED_CACHE_NAMESPACE, &key, &serde_json::to_vec(&v).unwrap()) {
        tracing::warn!(error = %e, "embedding cache write failed");
    }
    Ok(v)
}

pub type PairOutcome = Result<ScoredPair, EvalError>;

/// Scores each (obtained, ideal) pair. Failures stay per pair; the call
/// fails as a whole only when every pair failed.
pub async fn score_pairs(
    pairs: &[(String, String)],
    provider: &dyn EmbeddingProvider,
    cache: &dyn KvStore,
    max_in_flight: usize,
) -> Result<Vec<PairOutcome>, EvalError> {
    let mut distinct: Vec<&str> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (a, b) in pairs {
        for t in [a.as_str(), b.as_str()] {
            if seen.insert(t) {
                distinct.push(t);
            }
        }
    }
    let embedded: Vec<(&str, Result<Vec<f64>, ProviderError>)> = stream::iter(distinct)
        .map(|t| async move { (t, embed_cached(provider, cache, t).await) })
        .buffered(max_in_flight.max(1))
        .collect()
        .await;
    let vectors: HashMap<&str, Result<Vec<f64>, ProviderError>> = embedded.into_iter().collect();

    let outcomes: Vec<PairOutcome> = pairs
        .iter()
        .map(|(obtained, ideal)| {
            let u = vectors[obtained.as_str()].as_ref().map_err(|e| EvalError::Provider(e.clone()))?;
            let v = vectors[ideal.as_str()].as_ref().map_err(|e| EvalError::Provider(e.clone()))?;
            Ok(ScoredPair {
                obtained: obtained.clone(),
                ideal: ideal.clone(),
                score: cosine_similarity(u, v)?,
            })
        })
        .collect();
    if !outcomes.is_empty() && outcomes.iter().all(Result::is_err) {
        let first = outcomes[0].as_ref().unwrap_err().to_string();
        return Err(EvalError::AllPairsFailed(first));
    }
    Ok(outcomes)
}

/// Identifies a partition: SHA-256 of its canonical JSONL rendering.
pub fn dataset_fingerprint(examples: &[LabeledExample]) -> String {
    sha256_hex(&emit_finetune_jsonl(examples))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub model: String,
    pub temperature: f64,
    pub provider_id: String,
    pub aggregate: Option<EvalAggregate>,
    pub pairs: Vec<ScoredPair>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub models: Vec<String>,
    pub temperatures: Vec<f64>,
    pub dataset_fingerprint: String,
    pub cells: Vec<SweepCell>,
}

impl SweepGrid {
    pub fn cell(&self, model: &str, temperature: f64, provider_id: &str) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.model == model && c.temperature == temperature && c.provider_id == provider_id)
    }
}

/// For every (model, temperature) sends each example's prompt with the
/// standard role message, then scores completions against ideal outputs per
/// provider. Failures are recorded per cell and the sweep carries on.
pub async fn temperature_sweep(
    models: &[String],
    temperatures: &[f64],
    dataset: &[LabeledExample],
    backend: &dyn ChatBackend,
    providers: &[&dyn EmbeddingProvider],
    cache: &dyn KvStore,
) -> SweepGrid {
    let mut cells = Vec::new();
    for model in models {
        for &temperature in temperatures {
            let mut pairs = Vec::new();
            let mut call_failures = Vec::new();
            for ex in dataset {
                let req = ChatRequest {
                    system: ROLE_MESSAGE.to_string(),
                    user: ex.prompt_user_text.clone(),
                    model: model.clone(),
                    temperature,
                };
                match backend.complete(&req).await {
                    Ok(c) => pairs.push((c.trim().to_string(), ex.ideal_output.clone())),
                    Err(e) => call_failures.push(format!("{}: {e}", ex.article_id)),
                }
            }
            for p in providers {
                let mut failures = call_failures.clone();
                let mut scored = Vec::new();
                match score_pairs(&pairs, *p, cache, DEFAULT_EMBED_IN_FLIGHT).await {
                    Ok(outcomes) => {
                        for o in outcomes {
                            match o {
                                Ok(s) => scored.push(s),
                                Err(e) => failures.push(e.to_string()),
                            }
                        }
                    }
                    Err(e) => failures.push(e.to_string()),
                }
                let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
                cells.push(SweepCell {
                    model: model.clone(),
                    temperature,
                    provider_id: p.provider_id().to_string(),
                    aggregate: aggregate(p.provider_id(), &scores).ok(),
                    pairs: scored,
                    failures,
                });
            }
        }
    }
    SweepGrid {
        models: models.to_vec(),
        temperatures: temperatures.to_vec(),
        dataset_fingerprint: dataset_fingerprint(dataset),
        cells,
    }
}

/// Scores of one variant on one partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: String,
    pub dataset_fingerprint: String,
    pub aggregates: Vec<EvalAggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: String,
    pub provider: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub gain_vs_base: f64,
    pub pct_improvement_vs_base: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub base: String,
    pub rows: Vec<ComparisonRow>,
}

/// Mean and std per (variant, provider) with absolute and percentage change
/// against `base`. Rows follow report order, then the base's provider order.
pub fn compare_variants(reports: &[VariantReport], base: &str) -> Result<ComparisonTable, EvalError> {
    let base_report = reports
        .iter()
        .find(|r| r.variant == base)
        .ok_or_else(|| EvalError::MissingBase(base.to_string()))?;
    let base_means: BTreeMap<&str, f64> = base_report
        .aggregates
        .iter()
        .map(|a| (a.provider_id.as_str(), a.mean))
        .collect();
    let mut rows = Vec::new();
    for r in reports {
        if r.dataset_fingerprint != base_report.dataset_fingerprint {
            return Err(EvalError::PartitionMismatch(r.variant.clone()));
        }
        for b in &base_report.aggregates {
            let a = r
                .aggregates
                .iter()
                .find(|a| a.provider_id == b.provider_id)
                .ok_or_else(|| EvalError::ProviderMismatch {
                    variant: r.variant.clone(),
                    provider: b.provider_id.clone(),
                })?;
            let base_mean = base_means[b.provider_id.as_str()];
            rows.push(ComparisonRow {
                variant: r.variant.clone(),
                provider: a.provider_id.clone(),
                mean: a.mean,
                std: a.std,
                n: a.n,
                gain_vs_base: a.mean - base_mean,
                pct_improvement_vs_base: pct_improvement(base_mean, a.mean)?,
            });
        }
    }
    Ok(ComparisonTable {
        base: base.to_string(),
        rows,
    })
}

impl ComparisonTable {
    /// CSV with columns variant, provider, mean, std, n, pct_improvement_vs_base.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["variant", "provider", "mean", "std", "n", "pct_improvement_vs_base"])
            .unwrap();
        for r in &self.rows {
            w.write_record([
                r.variant.clone(),
                r.provider.clone(),
                r.mean.to_string(),
                r.std.to_string(),
                r.n.to_string(),
                r.pct_improvement_vs_base.to_string(),
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    /// "mean ± std (sample)" per row, two decimals.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&format!(
                "{:<24} {:<20} {:.2} ± {:.2} (sample, n={})  {:+}% vs {}\n",
                r.variant, r.provider, r.mean, r.std, r.n, r.pct_improvement_vs_base, self.base
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{MockChatBackend, MockFixtures};
    use crate::cache::MemoryStore;
    use crate::curation::LabeledExample;
    use crate::domain::{ExtractionRecord, StrainQuery};
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap() - 8.0 / 9.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0], &[1.0, 2.0]), Err(EvalError::DimensionMismatch(1, 2)));
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]), Err(EvalError::ZeroVector));
    }

    #[test]
    fn aggregate_examples() {
        let a = aggregate("p", &[0.5]).unwrap();
        assert_eq!((a.mean, a.std, a.n), (0.5, 0.0, 1));
        let a = aggregate("p", &[0.8, 1.0]).unwrap();
        assert!((a.mean - 0.9).abs() < 1e-12);
        assert!((a.std - 0.02f64.sqrt()).abs() < 1e-12);
        let a = aggregate("p", &[0.1; 7]).unwrap();
        assert_eq!((a.mean, a.std), (0.1, 0.0));
        assert_eq!(aggregate("p", &[]), Err(EvalError::EmptyInput));
    }

    #[test]
    fn improvement_examples() {
        let cases = [
            (0.79, 0.96, 22),
            (0.75, 0.94, 25),
            (0.91, 0.98, 8),
            (0.79, 0.92, 16),
            (0.78, 0.89, 14),
            (0.91, 0.96, 5),
        ];
        for (b, n, want) in cases {
            assert_eq!(pct_improvement(b, n).unwrap(), want);
        }
        assert_eq!(pct_improvement(0.5, 0.5).unwrap(), 0);
        assert!(matches!(pct_improvement(0.0, 1.0), Err(EvalError::NonpositiveBase(_))));
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(
            u in proptest::collection::vec(-10.0f64..10.0, 5),
            v in proptest::collection::vec(-10.0f64..10.0, 5),
            a in 0.01f64..100.0,
            b in 0.01f64..100.0,
        ) {
            prop_assume!(u.iter().any(|x| *x != 0.0) && v.iter().any(|x| *x != 0.0));
            let c = cosine_similarity(&u, &v).unwrap();
            prop_assert!((-1.0..=1.0).contains(&c));
            prop_assert!((c - cosine_similarity(&v, &u).unwrap()).abs() < 1e-12);
            let su: Vec<f64> = u.iter().map(|x| x * a).collect();
            let sv: Vec<f64> = v.iter().map(|x| x * b).collect();
            prop_assert!((c - cosine_similarity(&su, &sv).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn aggregate_mean_within_range(xs in proptest::collection::vec(-1.0f64..1.0, 1..30)) {
            let a = aggregate("p", &xs).unwrap();
            let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(a.mean >= lo - 1e-12 && a.mean <= hi + 1e-12);
            prop_assert!(a.std >= 0.0);
            prop_assert_eq!(a.std == 0.0, xs.iter().all(|x| *x == xs[0]));
        }
    }

    #[tokio::test]
    async fn scoring_dedups_and_caches() {
        let p = HashingEmbedder::new("fake", 32, 3);
        let cache = MemoryStore::default();
        let pairs = vec![
            ("glucose".to_string(), "glucose".to_string()),
            ("glucose".to_string(), "sugar".to_string()),
            ("sugar".to_string(), "starch".to_string()),
        ];
        let out = score_pairs(&pairs, &p, &cache, 8).await.unwrap();
        assert_eq!(p.calls(), 3);
        assert_eq!(out[0].as_ref().unwrap().score, 1.0);
        let golden = cosine_similarity(&p.embed_sync("glucose"), &p.embed_sync("sugar")).unwrap();
        assert_eq!(out[1].as_ref().unwrap().score, golden);
        score_pairs(&pairs, &p, &cache, 8).await.unwrap();
        assert_eq!(p.calls(), 3);
    }

    struct Broken;

    #[async_trait::async_trait]
    impl EmbeddingProvider for Broken {
        fn provider_id(&self) -> &str {
            "broken"
        }
        async fn embed(&self, _: &str) -> Result<Vec<f64>, ProviderError> {
            Err(ProviderError::Transport("down".into()))
        }
    }

    #[tokio::test]
    async fn all_failures_fail_the_batch() {
        let pairs = vec![("a".to_string(), "b".to_string())];
        let err = score_pairs(&pairs, &Broken, &MemoryStore::default(), 2).await.unwrap_err();
        assert!(matches!(err, EvalError::AllPairsFailed(_)));
        assert!(score_pairs(&[], &Broken, &MemoryStore::default(), 2).await.unwrap().is_empty());
    }

    fn dataset() -> Vec<LabeledExample> {
        let rec = ExtractionRecord::new("45", "heterotrophic", "glucose", "sugar").unwrap();
        (0..3)
            .map(|i| LabeledExample::positive(StrainQuery::parse("A b", 1).unwrap(), i.to_string(), format!("prompt {i}"), &rec))
            .collect()
    }

    #[tokio::test]
    async fn sweep_shape_and_null_temperature() {
        let backend = MockChatBackend::new(MockFixtures {
            default: Some("reported protein % dry mass: 40, trophic mechanism: heterotrophic, reported substrate: glucose, substrate class: sugar".into()),
            ..Default::default()
        });
        let fakes = HashingEmbedder::defaults(0);
        let providers: Vec<&dyn EmbeddingProvider> = fakes.iter().map(|p| p as &dyn EmbeddingProvider).collect();
        let grid = temperature_sweep(
            &["m".to_string()],
            &SWEEP_TEMPERATURES,
            &dataset(),
            &backend,
            &providers,
            &MemoryStore::default(),
        )
        .await;
        assert_eq!(grid.cells.len(), 18);
        for p in DEFAULT_PROVIDER_IDS {
            let first = grid.cell("m", 0.0, p).unwrap().aggregate.clone();
            for t in SWEEP_TEMPERATURES {
                assert_eq!(grid.cell("m", t, p).unwrap().aggregate, first);
            }
        }
        let empty = temperature_sweep(&[], &SWEEP_TEMPERATURES, &dataset(), &backend, &providers, &MemoryStore::default()).await;
        assert!(empty.cells.is_empty());
        assert_eq!(backend.calls(), 18);
    }

    fn report(name: &str, means: [f64; 3], fp: &str) -> VariantReport {
        VariantReport {
            variant: name.into(),
            dataset_fingerprint: fp.into(),
            aggregates: DEFAULT_PROVIDER_IDS
                .iter()
                .zip(means)
                .map(|(p, m)| EvalAggregate {
                    provider_id: p.to_string(),
                    mean: m,
                    std: 0.1,
                    n: 10,
                })
                .collect(),
        }
    }

    #[test]
    fn comparison_reproduces_reported_gains() {
        let reports = [
            report("base", [0.79, 0.75, 0.91], "fp"),
            report("fine_tuned", [0.96, 0.94, 0.98], "fp"),
        ];
        let t = compare_variants(&reports, "base").unwrap();
        let ft: Vec<i64> = t.rows[3..].iter().map(|r| r.pct_improvement_vs_base).collect();
        assert_eq!(ft, [22, 25, 8]);
        assert!(t.rows[..3].iter().all(|r| r.pct_improvement_vs_base == 0 && r.gain_vs_base == 0.0));
        let csv = t.to_csv();
        assert!(csv.starts_with("variant,provider,mean,std,n,pct_improvement_vs_base\n"));
        assert_eq!(csv.lines().count(), 7);

        let two = [
            report("base", [0.79, 0.78, 0.91], "fp"),
            report("two_stage", [0.92, 0.89, 0.96], "fp"),
        ];
        let t = compare_variants(&two, "base").unwrap();
        for (row, want) in t.rows[3..].iter().zip([0.13, 0.11, 0.05]) {
            assert!((row.gain_vs_base - want).abs() < 1e-9);
        }
    }

    #[test]
    fn comparison_rejects_partition_mismatch() {
        let reports = [report("base", [0.5; 3], "a"), report("other", [0.6; 3], "b")];
        assert_eq!(compare_variants(&reports, "base"), Err(EvalError::PartitionMismatch("other".into())));
        assert!(matches!(compare_variants(&reports, "zzz"), Err(EvalError::MissingBase(_))));
    }
}
