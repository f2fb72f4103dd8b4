use std::collections::BTreeMap;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use mpminer_bench::{articles, cas_numbers, examples, noisy_paper, prose, vectors};
use mpminer_core::curation::{emit_finetune_jsonl, stratified_split};
use mpminer_core::document::{clean_text, split_for_budget, strip_references, TokenBudget};
use mpminer_core::eval::cosine_similarity;
use mpminer_core::search::{merge_results, rank, score_relevance, KeywordSet, SearchConfig};
use mpminer_core::tox::{normalize_cas, screen_compounds, Compound, ToxDataset, ToxRecord};
use mpminer_core::StrainQuery;

fn search(c: &mut Criterion) {
    let q = StrainQuery::parse("Fusarium venenatum A3/5", 25).unwrap();
    let kw = KeywordSet::default();
    let pool = articles(1, 200);
    c.bench_function("score_relevance/200 articles", |b| {
        b.iter(|| pool.iter().map(|a| score_relevance(a, &q, &kw).value).sum::<u32>())
    });
    let cfg = SearchConfig::default();
    let batches: Vec<&[_]> = pool.chunks(20).collect();
    c.bench_function("merge_and_rank/200 articles", |b| {
        b.iter(|| rank(merge_results(batches.iter().copied(), &q, &cfg), cfg.threshold, 25))
    });
}

fn documents(c: &mut Criterion) {
    let paper = noisy_paper(2, 20);
    c.bench_function("clean_text/20 pages", |b| b.iter(|| clean_text(black_box(&paper))));
    c.bench_function("strip_references/20 pages", |b| b.iter(|| strip_references(black_box(&paper)).len()));
    let long = prose(3, 4000);
    let budget = TokenBudget::new(2000).unwrap();
    c.bench_function("split_for_budget/4000 sentences", |b| b.iter(|| split_for_budget(black_box(&long), budget)));
}

fn evaluation(c: &mut Criterion) {
    let vs = vectors(4, 2, 768);
    c.bench_function("cosine_similarity/768", |b| b.iter(|| cosine_similarity(black_box(&vs[0]), black_box(&vs[1]))));
}

fn curation(c: &mut Criterion) {
    let ds = examples(50, 20);
    c.bench_function("stratified_split/1000 examples", |b| b.iter(|| stratified_split(black_box(&ds), 7).unwrap()));
    c.bench_function("emit_finetune_jsonl/1000 examples", |b| b.iter(|| emit_finetune_jsonl(black_box(&ds))));
}

fn toxicity(c: &mut Criterion) {
    let numbers = cas_numbers(5, 1000);
    c.bench_function("normalize_cas/1000", |b| {
        b.iter(|| numbers.iter().filter(|n| normalize_cas(n).is_ok()).count())
    });
    let tox = ToxDataset {
        records: numbers
            .iter()
            .step_by(2)
            .enumerate()
            .map(|(i, n)| {
                let cas = normalize_cas(n).unwrap();
                (cas.clone(), ToxRecord { cas, mutagenic: i % 3 == 0, source_row: i + 1 })
            })
            .collect::<BTreeMap<_, _>>(),
    };
    let compounds: Vec<Compound> =
        numbers.iter().enumerate().map(|(i, n)| Compound::new(format!("ORG:{i}"), "c", Some(n))).collect();
    c.bench_function("screen_compounds/1000", |b| {
        b.iter_batched(|| compounds.clone(), |cs| screen_compounds("ORG", &cs, &tox), BatchSize::SmallInput)
    });
}

criterion_group!(benches, search, documents, evaluation, curation, toxicity);
criterion_main!(benches);
