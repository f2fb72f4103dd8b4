//! Deterministic inputs shared by the benchmarks.

use mpminer_core::curation::{LabeledExample, NegativeCategory};
use mpminer_core::search::ArticleMeta;
use mpminer_core::{ExtractionRecord, StrainQuery};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 16] = [
    "growth", "medium", "protein", "biomass", "yield", "glucose", "oxygen", "the", "of", "cells", "Fusarium",
    "venenatum", "fermentation", "pH", "culture", "strain",
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sentences of random words, with a paragraph break every so often.
pub fn prose(seed: u64, sentences: usize) -> String {
    let mut r = rng(seed);
    let mut out = String::new();
    for i in 0..sentences {
        if i > 0 {
            out.push_str(if r.random_bool(0.1) { "\n\n" } else { " " });
        }
        let n = r.random_range(5..20);
        let words: Vec<&str> = (0..n).map(|_| WORDS[r.random_range(0..WORDS.len())]).collect();
        out.push_str(&words.join(" "));
        out.push('.');
    }
    out
}

/// Prose with extraction debris: page numbers, banners, ragged whitespace.
pub fn noisy_paper(seed: u64, pages: usize) -> String {
    let mut out = String::new();
    for p in 0..pages {
        out.push_str(&prose(seed + p as u64, 30).replace(". ", ".   \t"));
        out.push_str(&format!("\n\n\n\n{}\nDownloaded from https://example.org\n", p + 1));
    }
    out.push_str("\nReferences\n[1] A. Author. Title. 2020.\n");
    out
}

pub fn articles(seed: u64, n: usize) -> Vec<ArticleMeta> {
    (0..n)
        .map(|i| ArticleMeta {
            article_id: format!("{i:05}"),
            title: prose(seed ^ i as u64, 1),
            r#abstract: Some(prose(seed.wrapping_add(i as u64), 8)),
            full_text_available: false,
        })
        .collect()
}

pub fn vectors(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..n).map(|_| (0..dim).map(|_| r.random_range(-1.0..1.0)).collect()).collect()
}

pub fn examples(strains: usize, per_strain: usize) -> Vec<LabeledExample> {
    let rec = ExtractionRecord::new("45", "heterotrophic", "glucose", "sugar").unwrap();
    let mut out = Vec::new();
    for s in 0..strains {
        let q = StrainQuery::parse(&format!("Fusarium venenatum S{s}"), 5).unwrap();
        for j in 0..per_strain {
            let id = format!("{s}-{j}");
            out.push(if j % 2 == 0 {
                LabeledExample::positive(q.clone(), &id, format!("prompt {id}"), &rec)
            } else {
                LabeledExample::negative(q.clone(), &id, format!("prompt {id}"), NegativeCategory::ALL[j % 4])
            });
        }
    }
    out
}

/// CAS numbers with a valid check digit.
pub fn cas_numbers(seed: u64, n: usize) -> Vec<String> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let body: String = (0..r.random_range(4..=9)).map(|_| char::from(b'0' + r.random_range(0..10u8))).collect();
            let check: u32 = body.chars().rev().zip(1u32..).map(|(c, w)| c.to_digit(10).unwrap() * w).sum::<u32>() % 10;
            let (first, second) = body.split_at(body.len() - 2);
            format!("{first}-{second}-{check}")
        })
        .collect()
}
