use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{estimate_tokens, PaperDocument, PartKind, TextPart};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartSidecar {
    pub kind: PartKind,
    pub start: usize,
    pub end: usize,
    pub token_estimate: usize,
}

/// JSON written next to `<article_id>.txt`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentSidecar {
    pub article_id: String,
    pub token_estimate: usize,
    pub parts: Vec<PartSidecar>,
}

fn file_stem(article_id: &str) -> String {
    article_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
        .collect()
}

fn paths(dir: &Path, article_id: &str) -> (PathBuf, PathBuf) {
    let stem = file_stem(article_id);
    (dir.join(format!("{stem}.txt")), dir.join(format!("{stem}.json")))
}

/// Writes the curated text as UTF-8 plus a sidecar with part boundaries.
pub fn save_document(dir: &Path, doc: &PaperDocument) -> io::Result<DocumentSidecar> {
    fs::create_dir_all(dir)?;
    let (txt, json) = paths(dir, &doc.article_id);
    let sidecar = DocumentSidecar {
        article_id: doc.article_id.clone(),
        token_estimate: estimate_tokens(&doc.curated_text),
        parts: doc
            .parts
            .iter()
            .map(|p| PartSidecar {
                kind: p.kind,
                start: p.start,
                end: p.end,
                token_estimate: estimate_tokens(&p.text),
            })
            .collect(),
    };
    fs::write(txt, &doc.curated_text)?;
    fs::write(json, serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(sidecar)
}

/// Rebuilds a document from disk. The raw text is not persisted, so the
/// curated text stands in for it.
pub fn load_document(dir: &Path, article_id: &str) -> io::Result<PaperDocument> {
    let (txt, json) = paths(dir, article_id);
    let curated_text = fs::read_to_string(txt)?;
    let sidecar: DocumentSidecar = serde_json::from_slice(&fs::read(json)?)?;
    let mut parts = Vec::with_capacity(sidecar.parts.len());
    for p in &sidecar.parts {
        let text = curated_text
            .get(p.start..p.end)
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "part range outside text"))?;
        parts.push(TextPart {
            kind: p.kind,
            start: p.start,
            end: p.end,
            text: text.to_string(),
        });
    }
    Ok(PaperDocument {
        article_id: sidecar.article_id,
        raw_text: curated_text.clone(),
        curated_text,
        parts,
    })
}
