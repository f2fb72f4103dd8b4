#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use async_trait::async_trait;
use mpminer_core::agent::{BackendError, ChatBackend, ChatRequest, MockChatBackend};
use mpminer_core::search::FixtureClient;
use mpminer_core::service::{http, AnalysisService, JobStore, Providers, ServiceSettings};
use mpminer_core::tox::{load_tox_dataset, FixturePathwayClient, ToxDataset};
use tokio::sync::Semaphore;

pub const SPECIES: &str = "Fusarium venenatum A3/5";
pub const ORGANISM: &str = "FVEN";

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn read_fixture(name: &str) -> String {
    std::fs::read_to_string(fixtures_dir().join(name)).unwrap()
}

pub fn search_client() -> FixtureClient {
    FixtureClient::from_json_file(&fixtures_dir().join("search.json")).unwrap()
}

pub fn chat_backend() -> MockChatBackend {
    MockChatBackend::from_json_str(&read_fixture("chat.json")).unwrap()
}

pub fn pathway_client() -> FixturePathwayClient {
    FixturePathwayClient::from_json_str(&read_fixture("pathway.json")).unwrap()
}

pub fn tox_dataset() -> ToxDataset {
    load_tox_dataset(&read_fixture("ames.csv")).unwrap().dataset
}

pub fn providers_with(chat: Arc<dyn ChatBackend>) -> Providers {
    Providers {
        bibliographic: Arc::new(search_client()),
        chat,
        pathway: Some(Arc::new(pathway_client())),
        tox: Some(Arc::new(tox_dataset())),
    }
}

pub fn providers() -> Providers {
    providers_with(Arc::new(chat_backend()))
}

pub fn service(providers: Providers, settings: ServiceSettings) -> Arc<AnalysisService> {
    AnalysisService::new(Arc::new(JobStore::in_memory().unwrap()), providers, settings).unwrap()
}

/// Serves the API on an ephemeral port and returns its base URL.
pub async fn spawn_server(svc: Arc<AnalysisService>) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(http::serve(svc, listener));
    format!("http://{addr}")
}

/// Serves an arbitrary router on an ephemeral port.
pub async fn spawn_router(router: axum::Router) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router).await });
    format!("http://{addr}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SseFrame {
    pub id: u64,
    pub event: String,
    pub data: serde_json::Value,
}

/// Parses a complete SSE body, skipping comments and keep-alives.
pub fn parse_sse(body: &str) -> Vec<SseFrame> {
    let mut out = Vec::new();
    for block in body.split("\n\n") {
        let (mut id, mut event, mut data) = (None, String::new(), String::new());
        for line in block.lines() {
            if let Some(v) = line.strip_prefix("id:") {
                id = v.trim().parse().ok();
            } else if let Some(v) = line.strip_prefix("event:") {
                event = v.trim().to_string();
            } else if let Some(v) = line.strip_prefix("data:") {
                data.push_str(v.trim_start());
            }
        }
        if let Some(id) = id {
            out.push(SseFrame {
                id,
                event,
                data: serde_json::from_str(&data).unwrap(),
            });
        }
    }
    out
}

/// Holds every completion until permits are added.
pub struct GatedBackend<B> {
    pub inner: B,
    pub gate: Arc<Semaphore>,
}

impl<B> GatedBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            gate: Arc::new(Semaphore::new(0)),
        }
    }
}

#[async_trait]
impl<B: ChatBackend> ChatBackend for GatedBackend<B> {
    async fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        self.gate.acquire().await.unwrap().forget();
        self.inner.complete(req).await
    }
}
