mod common;

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use common::spawn_router;
use mpminer_core::agent::{BackendError, ChatBackend, ChatRequest, OpenAiChatBackend};
use mpminer_core::cache::MemoryStore;
use mpminer_core::curation::{FineTuneClient, FineTuneError};
use mpminer_core::eval::{EmbeddingProvider, HttpEmbedder, ProviderError};
use mpminer_core::net::RetryPolicy;
use mpminer_core::search::eutils::EutilsClient;
use mpminer_core::search::{run_search, BibliographicClient, ClientError, SearchConfig};
use mpminer_core::tox::{BioCycClient, PathwayDbClient, PathwayError};
use mpminer_core::StrainQuery;
use serde_json::{json, Value};

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        base: Duration::from_millis(1),
        factor: 2,
        max_retries: 3,
    }
}

#[derive(Default)]
struct Log {
    hits: AtomicUsize,
    queries: Mutex<Vec<HashMap<String, String>>>,
    bodies: Mutex<Vec<Value>>,
    headers: Mutex<Vec<HeaderMap>>,
}

const PUBMED_XML: &str = r#"<?xml version="1.0"?>
<PubmedArticleSet>
 <PubmedArticle>
  <MedlineCitation><PMID Version="1">222</PMID>
   <Article><ArticleTitle>Fusarium venenatum A3/5 growth on glucose medium</ArticleTitle>
    <Abstract><AbstractText>Fusarium venenatum A3/5 fermentation yielded protein-rich biomass.</AbstractText></Abstract>
   </Article>
  </MedlineCitation>
  <PubmedData><ArticleIdList><ArticleId IdType="pubmed">222</ArticleId><ArticleId IdType="pmc">PMC9</ArticleId></ArticleIdList></PubmedData>
 </PubmedArticle>
 <PubmedArticle>
  <MedlineCitation><PMID Version="1">111</PMID>
   <Article><ArticleTitle>Soil isolates</ArticleTitle></Article>
  </MedlineCitation>
 </PubmedArticle>
</PubmedArticleSet>"#;

const PMC_XML: &str = r#"<pmc-articleset><article><front><title>ignored</title></front>
<body><sec><title>Results</title><p>Biomass contained 45% protein.</p></sec></body></article></pmc-articleset>"#;

async fn esearch(State(log): State<Arc<Log>>, Query(q): Query<HashMap<String, String>>) -> impl IntoResponse {
    let n = log.hits.fetch_add(1, Ordering::SeqCst);
    log.queries.lock().unwrap().push(q.clone());
    if n == 0 {
        return (StatusCode::TOO_MANY_REQUESTS, String::new());
    }
    let ids = if q["term"].ends_with("growth") { json!(["111", "222"]) } else { json!([]) };
    (StatusCode::OK, json!({"esearchresult": {"idlist": ids}}).to_string())
}

async fn efetch(Query(q): Query<HashMap<String, String>>) -> impl IntoResponse {
    match q["db"].as_str() {
        "pubmed" => (StatusCode::OK, PUBMED_XML),
        _ if q["id"] == "PMC9" => (StatusCode::OK, PMC_XML),
        _ => (StatusCode::NOT_FOUND, ""),
    }
}

async fn elink(Query(q): Query<HashMap<String, String>>) -> String {
    let links = if q["id"] == "222" { json!(["PMC9"]) } else { json!([]) };
    json!({"linksets": [{"linksetdbs": [{"linkname": "pubmed_pmc", "links": links}]}]}).to_string()
}

#[tokio::test]
async fn eutils_search_fetch_and_retry() {
    let log = Arc::new(Log::default());
    let base = spawn_router(
        Router::new()
            .route("/esearch.fcgi", get(esearch))
            .route("/efetch.fcgi", get(efetch))
            .route("/elink.fcgi", get(elink))
            .with_state(log.clone()),
    )
    .await;
    let client = EutilsClient::new(&base, Some("KEY".into()))
        .with_rate(1000.0)
        .with_retry(fast_retry());

    let found = client.search("Fusarium venenatum A3/5 growth", 5).await.unwrap();
    assert_eq!(found.iter().map(|a| a.article_id.as_str()).collect::<Vec<_>>(), vec!["111", "222"]);
    assert!(found[1].full_text_available && !found[0].full_text_available);
    assert_eq!(found[1].r#abstract.as_deref(), Some("Fusarium venenatum A3/5 fermentation yielded protein-rich biomass."));
    let q = log.queries.lock().unwrap()[1].clone();
    assert_eq!((q["db"].as_str(), q["retmax"].as_str(), q["api_key"].as_str()), ("pubmed", "5", "KEY"));
    assert_eq!(log.hits.load(Ordering::SeqCst), 2, "one rate-limited attempt plus one retry");

    assert_eq!(
        client.fetch_fulltext(&found[1]).await.unwrap().as_deref(),
        Some("Results\n\nBiomass contained 45% protein.")
    );
    assert_eq!(client.fetch_fulltext(&found[0]).await.unwrap(), None);

    let cache = MemoryStore::new();
    let q = StrainQuery::parse("Fusarium venenatum A3/5", 5).unwrap();
    let ranked = run_search(&q, &SearchConfig::default(), &client, &cache).await.unwrap();
    assert_eq!(ranked.articles.len(), 1);
    assert_eq!(ranked.articles[0].meta.article_id, "222");
    assert!(ranked.articles[0].content.as_ref().unwrap().is_full_text());

    let down = EutilsClient::new("http://127.0.0.1:9", None).with_retry(RetryPolicy::none());
    assert!(matches!(down.search("x", 1).await, Err(ClientError::Transport(_))));
}

async fn chat(State(log): State<Arc<Log>>, headers: HeaderMap, Json(body): Json<Value>) -> impl IntoResponse {
    let n = log.hits.fetch_add(1, Ordering::SeqCst);
    log.bodies.lock().unwrap().push(body.clone());
    log.headers.lock().unwrap().push(headers);
    match body["model"].as_str() {
        Some("flaky") if n == 0 => (StatusCode::SERVICE_UNAVAILABLE, "busy".to_string()),
        Some("bad") => (StatusCode::BAD_REQUEST, "no such model".to_string()),
        Some("garbled") => (StatusCode::OK, "{\"choices\": []}".to_string()),
        _ => (
            StatusCode::OK,
            json!({"choices": [{"message": {"role": "assistant", "content": format!("echo: {}", body["messages"][1]["content"].as_str().unwrap())}}]})
                .to_string(),
        ),
    }
}

#[tokio::test]
async fn openai_chat_backend() {
    let log = Arc::new(Log::default());
    let base = spawn_router(Router::new().route("/chat/completions", post(chat)).with_state(log.clone())).await;
    let backend = OpenAiChatBackend::new(&base, Some("sk-test".into())).with_retry(fast_retry());
    let mut req = ChatRequest {
        system: "You are a helpful assistant.".into(),
        user: "hello".into(),
        model: "flaky".into(),
        temperature: 0.3,
    };
    assert_eq!(backend.complete(&req).await.unwrap(), "echo: hello");
    assert_eq!(log.hits.load(Ordering::SeqCst), 2);
    let sent = log.bodies.lock().unwrap()[1].clone();
    assert_eq!(sent["temperature"], 0.3);
    assert_eq!(sent["messages"][0], json!({"role": "system", "content": "You are a helpful assistant."}));
    assert_eq!(log.headers.lock().unwrap()[1]["authorization"], "Bearer sk-test");

    req.model = "bad".into();
    assert!(matches!(backend.complete(&req).await, Err(BackendError::Http { status: 400, .. })));
    req.model = "garbled".into();
    assert!(matches!(backend.complete(&req).await, Err(BackendError::Malformed(_))));
}

async fn embed(
    State(log): State<Arc<Log>>,
    Path(model): Path<String>,
    Json(body): Json<Value>,
) -> impl IntoResponse {
    let n = log.hits.fetch_add(1, Ordering::SeqCst);
    if model == "flaky" && n == 0 {
        return (StatusCode::BAD_GATEWAY, String::new());
    }
    let text = body["text"].as_str().unwrap();
    let dim = if model == "shifty" { 2 + n % 2 } else { 3 };
    let v: Vec<f64> = (0..dim).map(|i| (text.len() + i) as f64).collect();
    (StatusCode::OK, json!({ "vector": v }).to_string())
}

#[tokio::test]
async fn http_embedder() {
    let log = Arc::new(Log::default());
    let base = spawn_router(Router::new().route("/{model}", post(embed)).with_state(log.clone())).await;
    let e = HttpEmbedder::new(&base, "flaky", None).with_retry(fast_retry());
    assert_eq!(e.provider_id(), "flaky");
    assert_eq!(e.embed("abcd").await.unwrap(), vec![4.0, 5.0, 6.0]);
    assert_eq!(log.hits.load(Ordering::SeqCst), 2);

    let shifty = HttpEmbedder::new(&base, "shifty", None).with_retry(RetryPolicy::none());
    shifty.embed("a").await.unwrap();
    assert!(matches!(shifty.embed("a").await, Err(ProviderError::DimensionChanged { .. })));
}

async fn login(State(log): State<Arc<Log>>, body: Bytes) -> impl IntoResponse {
    log.hits.fetch_add(1, Ordering::SeqCst);
    let form = String::from_utf8(body.to_vec()).unwrap();
    if form.contains("password=right") {
        (StatusCode::OK, [("set-cookie", "PTools-session=abc; Path=/; HttpOnly")]).into_response()
    } else {
        StatusCode::UNAUTHORIZED.into_response()
    }
}

async fn xmlquery(headers: HeaderMap, Query(q): Query<HashMap<String, String>>) -> impl IntoResponse {
    if headers.get("cookie").and_then(|c| c.to_str().ok()) != Some("PTools-session=abc") {
        return (StatusCode::FORBIDDEN, String::new());
    }
    assert_eq!(q["detail"], "full");
    match q["query"].as_str() {
        "[x:x<-FVEN^^compounds]" => (
            StatusCode::OK,
            r#"<ptools-xml><Compound ID="FVEN:FORMALDEHYDE"><common-name>formaldehyde</common-name>
<dblink><dblink-db>CAS</dblink-db><dblink-oid>50-00-0</dblink-oid></dblink></Compound></ptools-xml>"#
                .to_string(),
        ),
        _ => (StatusCode::NOT_FOUND, String::new()),
    }
}

#[tokio::test]
async fn biocyc_login_and_query() {
    let log = Arc::new(Log::default());
    let base = spawn_router(
        Router::new()
            .route("/credentials/login/", post(login))
            .route("/xmlquery", get(xmlquery))
            .with_state(log.clone()),
    )
    .await;
    let client = BioCycClient::new(&base, Some(("me@example.org".into(), "right".into())))
        .with_rate(1000.0)
        .with_retry(fast_retry());
    let list = client.organism_compounds("FVEN").await.unwrap();
    assert_eq!(list.len(), 1);
    assert_eq!(list[0].cas.as_deref(), Some("50-00-0"));
    client.organism_compounds("FVEN").await.unwrap();
    assert_eq!(log.hits.load(Ordering::SeqCst), 1, "session cookie is reused");
    assert_eq!(
        client.organism_compounds("NOPE").await,
        Err(PathwayError::UnknownOrganism("NOPE".into()))
    );

    let wrong = BioCycClient::new(&base, Some(("me@example.org".into(), "wrong".into()))).with_rate(1000.0);
    assert!(matches!(wrong.organism_compounds("FVEN").await, Err(PathwayError::Auth(_))));
    let anonymous = BioCycClient::new(&base, None).with_rate(1000.0);
    assert!(matches!(anonymous.organism_compounds("FVEN").await, Err(PathwayError::Auth(_))));
}

async fn upload(State(log): State<Arc<Log>>, headers: HeaderMap, body: Bytes) -> Json<Value> {
    let ct = headers["content-type"].to_str().unwrap().to_string();
    assert!(ct.starts_with("multipart/form-data"));
    let text = String::from_utf8_lossy(&body).to_string();
    log.bodies.lock().unwrap().push(json!({ "multipart": text }));
    Json(json!({"id": "file-1", "object": "file"}))
}

async fn create_job(State(log): State<Arc<Log>>, Json(body): Json<Value>) -> Json<Value> {
    log.bodies.lock().unwrap().push(body);
    Json(json!({"id": "ftjob-1", "status": "queued", "fine_tuned_model": null}))
}

async fn job_status(State(log): State<Arc<Log>>, Path(id): Path<String>) -> impl IntoResponse {
    if id != "ftjob-1" {
        return (StatusCode::NOT_FOUND, Json(json!({"error": "no job"})));
    }
    let n = log.hits.fetch_add(1, Ordering::SeqCst);
    let status = if n < 2 { "running" } else { "succeeded" };
    let model = (n >= 2).then_some("ft:gpt-4o:org::abc");
    (StatusCode::OK, Json(json!({"id": id, "status": status, "fine_tuned_model": model})))
}

async fn checkpoints() -> Json<Value> {
    Json(json!({"data": [
        {"id": "c2", "fine_tuned_model_checkpoint": "ft:gpt-4o:org::abc:ckpt-step-20", "step_number": 20},
        {"id": "c1", "fine_tuned_model_checkpoint": "ft:gpt-4o:org::abc:ckpt-step-10", "step_number": 10}
    ]}))
}

#[tokio::test]
async fn finetune_client_round_trip() {
    let log = Arc::new(Log::default());
    let base = spawn_router(
        Router::new()
            .route("/files", post(upload))
            .route("/fine_tuning/jobs", post(create_job))
            .route("/fine_tuning/jobs/{id}", get(job_status))
            .route("/fine_tuning/jobs/{id}/checkpoints", get(checkpoints))
            .with_state(log.clone()),
    )
    .await;
    let client = FineTuneClient::new(&base, Some("sk".into()));
    let file = client.upload_file("train.jsonl", b"{\"messages\":[]}\n".to_vec()).await.unwrap();
    assert_eq!(file, "file-1");
    let job = client.create_job("gpt-4o", &file, Some("file-2"), 10).await.unwrap();
    assert_eq!((job.id.as_str(), job.status.as_str()), ("ftjob-1", "queued"));
    {
        let bodies = log.bodies.lock().unwrap();
        let multipart = bodies[0]["multipart"].as_str().unwrap();
        assert!(multipart.contains("fine-tune") && multipart.contains("filename=\"train.jsonl\""));
        assert!(multipart.contains("{\"messages\":[]}"));
        assert_eq!(bodies[1]["hyperparameters"]["n_epochs"], 10);
        assert_eq!(bodies[1]["validation_file"], "file-2");
    }
    let done = client.wait("ftjob-1", Duration::from_millis(1), 10).await.unwrap();
    assert_eq!(done.fine_tuned_model.as_deref(), Some("ft:gpt-4o:org::abc"));
    let cps = client.list_checkpoints("ftjob-1").await.unwrap();
    assert_eq!(cps.iter().map(|c| c.step_number).collect::<Vec<_>>(), vec![10, 20]);
    assert!(matches!(client.get_job("other").await, Err(FineTuneError::Http { status: 404, .. })));
}
