//! Builds provider adapters from configuration. A configured fixture file
//! always wins over the matching network adapter.

use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use mpminer_core::agent::{ChatBackend, MockChatBackend, OpenAiChatBackend, DEFAULT_LLM_BASE_URL};
use mpminer_core::config::AppConfig;
use mpminer_core::eval::{EmbeddingProvider, HashingEmbedder, HttpEmbedder};
use mpminer_core::search::eutils::{EutilsClient, DEFAULT_BASE_URL};
use mpminer_core::search::{BibliographicClient, FixtureClient};
use mpminer_core::service::Providers;
use mpminer_core::tox::{load_tox_dataset, BioCycClient, FixturePathwayClient, PathwayDbClient, ToxDataset, DEFAULT_BIOCYC_BASE_URL};

pub fn bibliographic(cfg: &AppConfig) -> Result<Arc<dyn BibliographicClient>> {
    if let Some(path) = &cfg.mock.search_fixtures {
        let client = FixtureClient::from_json_file(path)
            .with_context(|| format!("reading search fixtures {}", path.display()))?;
        return Ok(Arc::new(client));
    }
    let p = &cfg.providers;
    let base = p.pubmed_base_url.clone().unwrap_or_else(|| DEFAULT_BASE_URL.to_string());
    Ok(Arc::new(EutilsClient::new(base, p.pubmed_api_key.clone())))
}

pub fn chat(cfg: &AppConfig) -> Result<Arc<dyn ChatBackend>> {
    if let Some(path) = &cfg.mock.chat_fixtures {
        let mock = MockChatBackend::from_json_file(path)
            .with_context(|| format!("reading chat fixtures {}", path.display()))?;
        return Ok(Arc::new(mock));
    }
    let p = &cfg.providers;
    let base = p.llm_base_url.clone().unwrap_or_else(|| DEFAULT_LLM_BASE_URL.to_string());
    Ok(Arc::new(OpenAiChatBackend::new(base, p.llm_api_key.clone())))
}

pub fn pathway(cfg: &AppConfig) -> Result<Arc<dyn PathwayDbClient>> {
    if let Some(path) = &cfg.mock.pathway_fixtures {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let client = FixturePathwayClient::from_json_str(&text)
            .with_context(|| format!("parsing pathway fixtures {}", path.display()))?;
        return Ok(Arc::new(client));
    }
    let p = &cfg.providers;
    let base = p.biocyc_base_url.clone().unwrap_or_else(|| DEFAULT_BIOCYC_BASE_URL.to_string());
    let creds = p.biocyc_user.clone().zip(p.biocyc_password.clone());
    Ok(Arc::new(BioCycClient::new(base, creds)))
}

/// Loads the mutagenicity table, reporting skipped rows on stderr.
pub fn tox_dataset(path: &Path) -> Result<ToxDataset> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let load = load_tox_dataset(&text).with_context(|| format!("loading {}", path.display()))?;
    for e in &load.row_errors {
        eprintln!("warning: {} row {}: {}", path.display(), e.row, e.message);
    }
    Ok(load.dataset)
}

/// One embedder per provider id: the hashing fake when asked for, otherwise
/// the HTTP adapter, which needs a configured base URL.
pub fn embedders(cfg: &AppConfig, ids: &[String], fake: bool) -> Result<Vec<Box<dyn EmbeddingProvider>>> {
    ids.iter()
        .map(|id| -> Result<Box<dyn EmbeddingProvider>> {
            if fake {
                return Ok(Box::new(HashingEmbedder::new(id.clone(), 256, 0)));
            }
            let base = cfg
                .providers
                .embed_base_url
                .clone()
                .context("no embedding endpoint configured (set EMBED_BASE_URL or pass --fake-embeddings)")?;
            Ok(Box::new(HttpEmbedder::new(base, id.clone(), cfg.providers.embed_api_key.clone())))
        })
        .collect()
}

pub fn service_providers(cfg: &AppConfig) -> Result<Providers> {
    let tox = cfg.tox.dataset_path.as_deref().map(tox_dataset).transpose()?.map(Arc::new);
    Ok(Providers {
        bibliographic: bibliographic(cfg)?,
        chat: chat(cfg)?,
        pathway: Some(pathway(cfg)?),
        tox,
    })
}
