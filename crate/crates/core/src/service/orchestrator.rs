use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use futures::stream::{self, StreamExt};
use thiserror::Error;
use tokio::sync::{watch, OwnedSemaphorePermit, Semaphore};

use super::store::{JobRecord, JobStore, StoreError};
use super::{
    consensus, AnalysisRequest, AnalysisResult, EventKind, JobEvent, JobState, PaperOutcome, Progress,
    ToxicitySection,
};
use crate::agent::{run_variant, ChatBackend};
use crate::config::{AgentSettings, AppConfig, ServerConfig};
use crate::document::PaperDocument;
use crate::domain::{AgentVariant, ExtractionOutcome, StrainQuery};
use crate::search::{run_search, BibliographicClient, PaperStatus, SearchConfig, SearchError};
use crate::tox::{screen, PathwayDbClient, ToxDataset};

/// The external services a job talks to.
#[derive(Clone)]
pub struct Providers {
    pub bibliographic: Arc<dyn BibliographicClient>,
    pub chat: Arc<dyn ChatBackend>,
    pub pathway: Option<Arc<dyn PathwayDbClient>>,
    pub tox: Option<Arc<ToxDataset>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ServiceSettings {
    pub server: ServerConfig,
    pub search: SearchConfig,
    pub agent: AgentSettings,
}

impl From<&AppConfig> for ServiceSettings {
    fn from(c: &AppConfig) -> Self {
        Self {
            server: c.server.clone(),
            search: c.search.clone(),
            agent: c.agent.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum CreateError {
    #[error("{0}")]
    Validation(String),
    #[error("job queue is full")]
    Overloaded,
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Owns the job queue. Admission is bounded by `queue_capacity` waiting
/// plus `max_running` executing jobs; each admitted job runs as its own task.
pub struct AnalysisService {
    store: Arc<JobStore>,
    providers: Providers,
    settings: ServiceSettings,
    slots: Arc<Semaphore>,
    runners: Arc<Semaphore>,
    watchers: Mutex<HashMap<String, watch::Sender<u64>>>,
}

struct Plan {
    query: StrainQuery,
    variant: AgentVariant,
    organism_id: Option<String>,
}

impl AnalysisService {
    /// Fails any job a previous process left unfinished before accepting work.
    pub fn new(store: Arc<JobStore>, providers: Providers, settings: ServiceSettings) -> Result<Arc<Self>, StoreError> {
        let interrupted = store.fail_interrupted()?;
        if !interrupted.is_empty() {
            tracing::warn!(count = interrupted.len(), "marked interrupted jobs as failed");
        }
        let running = settings.server.max_running.max(1);
        Ok(Arc::new(Self {
            slots: Arc::new(Semaphore::new(settings.server.queue_capacity + running)),
            runners: Arc::new(Semaphore::new(running)),
            store,
            providers,
            settings,
            watchers: Mutex::new(HashMap::new()),
        }))
    }

    pub fn store(&self) -> &Arc<JobStore> {
        &self.store
    }

    pub fn settings(&self) -> &ServiceSettings {
        &self.settings
    }

    fn plan(&self, req: &AnalysisRequest) -> Result<Plan, CreateError> {
        let invalid = |m: String| CreateError::Validation(m);
        let ceiling = self.settings.server.max_papers_ceiling;
        if req.max_papers == 0 || req.max_papers > ceiling {
            return Err(invalid(format!("max_papers must be between 1 and {ceiling}")));
        }
        let query = StrainQuery::parse(&req.species, req.max_papers).map_err(|e| invalid(e.to_string()))?;
        let defaults = &self.settings.agent;
        let strategy = req.strategy.unwrap_or(defaults.strategy);
        let epoch = req
            .checkpoint_epoch
            .or(defaults.checkpoint_epoch.filter(|_| strategy == defaults.strategy));
        let variant = AgentVariant::new(
            req.model.clone().unwrap_or_else(|| defaults.model.clone()),
            strategy,
            req.temperature.unwrap_or(defaults.temperature),
            epoch,
        )
        .map_err(|e| invalid(e.to_string()))?;
        let organism_id = match req.organism_id.as_deref().map(str::trim) {
            Some("") => return Err(invalid("organism_id must not be blank".into())),
            other => other.map(str::to_string),
        };
        Ok(Plan {
            query,
            variant,
            organism_id,
        })
    }

    /// Validates, persists in `Queued`, and schedules the pipeline.
    pub fn create_analysis(self: &Arc<Self>, req: AnalysisRequest) -> Result<String, CreateError> {
        let plan = self.plan(&req)?;
        let slot = self.slots.clone().try_acquire_owned().map_err(|_| CreateError::Overloaded)?;
        let job_id = uuid::Uuid::new_v4().to_string();
        let first = self.store.insert_job(&job_id, &req)?;
        let (tx, _) = watch::channel(first.id);
        self.watchers.lock().unwrap().insert(job_id.clone(), tx);
        let svc = Arc::clone(self);
        let id = job_id.clone();
        tokio::spawn(async move { svc.run_job(id, plan, slot).await });
        Ok(job_id)
    }

    pub fn job(&self, job_id: &str) -> Result<Option<JobRecord>, StoreError> {
        self.store.job(job_id)
    }

    /// Receiver whose value is the id of the latest event; `None` for jobs
    /// not started by this process.
    pub fn subscribe(&self, job_id: &str) -> Option<watch::Receiver<u64>> {
        self.watchers.lock().unwrap().get(job_id).map(|tx| tx.subscribe())
    }

    /// Resolves once the job is `Done` or `Failed`.
    pub async fn wait_until_terminal(&self, job_id: &str) -> Result<Option<JobRecord>, StoreError> {
        let mut rx = self.subscribe(job_id);
        loop {
            if let Some(rx) = rx.as_mut() {
                rx.borrow_and_update();
            }
            let job = self.store.job(job_id)?;
            match (&job, rx.as_mut()) {
                (None, _) => return Ok(None),
                (Some(j), _) if j.state.is_terminal() => return Ok(job),
                (Some(_), Some(rx)) => {
                    if rx.changed().await.is_err() {
                        return self.store.job(job_id);
                    }
                }
                (Some(_), None) => return Ok(job),
            }
        }
    }

    fn emit(
        &self,
        job_id: &str,
        kind: EventKind,
        next: Option<JobState>,
        message: &str,
        progress: Progress,
    ) -> Result<JobEvent, String> {
        let ev = self
            .store
            .record_event(job_id, kind, next, message, Some(progress))
            .map_err(|e| e.to_string())?;
        if let Some(tx) = self.watchers.lock().unwrap().get(job_id) {
            tx.send_replace(ev.id);
        }
        Ok(ev)
    }

    async fn run_job(self: Arc<Self>, job_id: String, plan: Plan, _slot: OwnedSemaphorePermit) {
        let _runner = self.runners.clone().acquire_owned().await;
        let svc = Arc::clone(&self);
        let id = job_id.clone();
        let outcome = tokio::spawn(async move { svc.execute(&id, plan).await }).await;
        let failure = match outcome {
            Ok(Ok(())) => return,
            Ok(Err(msg)) => msg,
            Err(e) => format!("internal error: {e}"),
        };
        tracing::warn!(job_id = %job_id, reason = %failure, "analysis failed");
        let progress = self.store.job(&job_id).ok().flatten().map(|j| j.progress).unwrap_or_default();
        if let Err(e) = self.emit(&job_id, EventKind::State, Some(JobState::Failed), &failure, progress) {
            tracing::error!(job_id = %job_id, error = %e, "could not record failure");
        }
    }

    async fn execute(&self, job_id: &str, plan: Plan) -> Result<(), String> {
        let Plan {
            query,
            variant,
            organism_id,
        } = plan;
        let mut progress = Progress::default();
        let emit_state = |s: JobState, msg: &str, p: Progress| self.emit(job_id, EventKind::State, Some(s), msg, p);
        let emit_paper = |msg: &str, p: Progress| self.emit(job_id, EventKind::Paper, None, msg, p);

        emit_state(JobState::Searching, &format!("searching literature for {query}"), progress)?;
        let search_cfg = SearchConfig {
            fetch_fulltext: true,
            ..self.settings.search.clone()
        };
        let providers = &self.providers;
        let found = match run_search(&query, &search_cfg, &*providers.bibliographic, &*self.store).await {
            Ok(found) => found,
            Err(SearchError::AllQueriesFailed { last, history }) => {
                self.store.put_history(job_id, &history).map_err(|e| e.to_string())?;
                return Err(format!("literature search failed: {last}"));
            }
        };
        let mut history = found.history;
        progress.papers_found = found.articles.len();
        emit_paper(&format!("{} relevant papers found", progress.papers_found), progress)?;
        for a in &found.articles {
            let msg = match &a.content {
                Some(c) => {
                    progress.papers_fetched += 1;
                    let kind = if c.is_full_text() { "full text" } else { "abstract only" };
                    format!("fetched {} ({kind})", a.meta.article_id)
                }
                None => format!("no text retrieved for {}", a.meta.article_id),
            };
            emit_paper(&msg, progress)?;
        }
        self.store.put_history(job_id, &history).map_err(|e| e.to_string())?;

        emit_state(
            JobState::Extracting,
            &format!("extracting from {} papers with {:?}", progress.papers_fetched, variant.strategy),
            progress,
        )?;
        let budget = self.settings.agent.budget_for(&variant.model_id);
        let agent_cfg = self.settings.agent.agent_config();
        let docs: Vec<PaperDocument> = found
            .articles
            .iter()
            .filter_map(|a| {
                a.content
                    .as_ref()
                    .map(|c| PaperDocument::curate(a.meta.article_id.clone(), c.text(), budget))
            })
            .collect();
        let chat = &*providers.chat;
        let mut runs = stream::iter(0..docs.len())
            .map(|i| {
                let (doc, query, variant) = (&docs[i], &query, &variant);
                async move { (doc, run_variant(query, doc, chat, variant, &agent_cfg).await) }
            })
            .buffered(agent_cfg.max_in_flight.max(1));
        let mut outcomes: HashMap<String, (PaperStatus, Option<crate::domain::ExtractionRecord>)> = HashMap::new();
        while let Some((doc, run)) = runs.next().await {
            progress.papers_extracted += 1;
            let (status, record, msg) = match run {
                Ok(r) => match r.outcome {
                    ExtractionOutcome::Record(rec) => {
                        (PaperStatus::Extracted, Some(rec), format!("extracted {}", doc.article_id))
                    }
                    ExtractionOutcome::Negative => (
                        PaperStatus::Negative,
                        None,
                        format!("no requested information in {}", doc.article_id),
                    ),
                },
                Err(e) => (
                    PaperStatus::Failed { reason: e.to_string() },
                    None,
                    format!("extraction failed for {}: {e}", doc.article_id),
                ),
            };
            history.record_extraction(&doc.article_id, status.clone());
            outcomes.insert(doc.article_id.clone(), (status, record));
            emit_paper(&msg, progress)?;
        }
        drop(runs);
        self.store.put_history(job_id, &history).map_err(|e| e.to_string())?;

        let screen_msg = match &organism_id {
            Some(org) => format!("screening compounds of {org}"),
            None => "no organism id given; toxicity screening skipped".to_string(),
        };
        emit_state(JobState::Screening, &screen_msg, progress)?;
        let toxicity = match (&organism_id, &providers.pathway, &providers.tox) {
            (None, _, _) => ToxicitySection::default(),
            (Some(org), Some(client), Some(tox)) => match screen(org, &**client, &*self.store, tox).await {
                Ok(report) => ToxicitySection {
                    organism_id: Some(org.clone()),
                    report: Some(report),
                    error: None,
                },
                Err(e) => ToxicitySection {
                    organism_id: Some(org.clone()),
                    report: None,
                    error: Some(e.to_string()),
                },
            },
            (Some(org), _, _) => ToxicitySection {
                organism_id: Some(org.clone()),
                report: None,
                error: Some("toxicity screening is not configured".into()),
            },
        };

        let mut papers = Vec::with_capacity(found.articles.len());
        for a in &found.articles {
            let (status, record) = outcomes.remove(&a.meta.article_id).unwrap_or_else(|| {
                let reason = history
                    .papers
                    .iter()
                    .find(|p| p.article_id == a.meta.article_id)
                    .and_then(|p| match &p.fetch {
                        crate::search::FetchStatus::Failed { reason } => Some(reason.clone()),
                        _ => None,
                    })
                    .unwrap_or_else(|| "no text retrieved".into());
                (PaperStatus::Failed { reason }, None)
            });
            papers.push(PaperOutcome {
                article_id: a.meta.article_id.clone(),
                title: a.meta.title.clone(),
                status,
                record,
            });
        }
        let records: Vec<_> = papers.iter().filter_map(|p| p.record.clone()).collect();
        let result = AnalysisResult {
            species: query.display_form(),
            variant,
            papers_analysed: papers
                .iter()
                .filter(|p| matches!(p.status, PaperStatus::Extracted | PaperStatus::Negative))
                .count(),
            consensus: consensus(&records),
            papers,
            toxicity,
            search_history: history,
        };
        let body = serde_json::to_vec(&result).map_err(|e| e.to_string())?;
        self.store.put_results(job_id, &body).map_err(|e| e.to_string())?;
        emit_state(
            JobState::Done,
            &format!("analysis complete: {} papers analysed", result.papers_analysed),
            progress,
        )?;
        Ok(())
    }
}
