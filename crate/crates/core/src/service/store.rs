use std::io;
use std::path::Path;
use std::sync::Mutex;

use chrono::{DateTime, SecondsFormat, Utc};
use rusqlite::{params, Connection, OptionalExtension};
use thiserror::Error;

use super::{AnalysisRequest, EventKind, JobEvent, JobState, Progress};
use crate::cache::KvStore;
use crate::search::SearchHistory;

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS jobs (
    job_id TEXT PRIMARY KEY,
    request TEXT NOT NULL,
    state TEXT NOT NULL,
    message TEXT NOT NULL,
    papers_found INTEGER NOT NULL DEFAULT 0,
    papers_fetched INTEGER NOT NULL DEFAULT 0,
    papers_extracted INTEGER NOT NULL DEFAULT 0,
    created_at TEXT NOT NULL,
    updated_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS events (
    job_id TEXT NOT NULL REFERENCES jobs(job_id),
    seq INTEGER NOT NULL,
    kind TEXT NOT NULL,
    state TEXT NOT NULL,
    message TEXT NOT NULL,
    progress TEXT NOT NULL,
    PRIMARY KEY (job_id, seq)
);
CREATE TABLE IF NOT EXISTS results (
    job_id TEXT PRIMARY KEY REFERENCES jobs(job_id),
    body BLOB NOT NULL
);
CREATE TABLE IF NOT EXISTS search_history (
    job_id TEXT PRIMARY KEY REFERENCES jobs(job_id),
    body TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS embeddings_cache (
    key TEXT PRIMARY KEY,
    value BLOB NOT NULL
);
CREATE TABLE IF NOT EXISTS article_cache (
    namespace TEXT NOT NULL,
    key TEXT NOT NULL,
    value BLOB NOT NULL,
    PRIMARY KEY (namespace, key)
);
";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("database error: {0}")]
    Sqlite(#[from] rusqlite::Error),
    #[error("stored JSON is invalid: {0}")]
    Json(#[from] serde_json::Error),
    #[error("job {0} not found")]
    UnknownJob(String),
    #[error("illegal transition {from:?} -> {to:?}")]
    IllegalTransition { from: JobState, to: JobState },
    #[error("stored state '{0}' is not recognised")]
    BadState(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobRecord {
    pub job_id: String,
    pub request: AnalysisRequest,
    pub state: JobState,
    pub message: String,
    pub progress: Progress,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

/// SQLite-backed persistence for jobs, their event logs, results, search
/// histories and the shared caches.
pub struct JobStore {
    conn: Mutex<Connection>,
}

fn ts(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Micros, true)
}

fn parse_ts(s: &str) -> DateTime<Utc> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .unwrap_or_default()
}

fn parse_state(s: &str) -> Result<JobState, StoreError> {
    JobState::parse(s).ok_or_else(|| StoreError::BadState(s.to_string()))
}

impl JobStore {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        Self::init(Connection::open(path)?)
    }

    pub fn in_memory() -> Result<Self, StoreError> {
        Self::init(Connection::open_in_memory()?)
    }

    fn init(conn: Connection) -> Result<Self, StoreError> {
        conn.pragma_update(None, "journal_mode", "WAL").ok();
        conn.execute_batch(SCHEMA)?;
        Ok(Self { conn: Mutex::new(conn) })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Connection> {
        self.conn.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Persists a new job in `Queued` together with its first event.
    pub fn insert_job(&self, job_id: &str, request: &AnalysisRequest) -> Result<JobEvent, StoreError> {
        let now = ts(Utc::now());
        let mut conn = self.lock();
        let tx = conn.transaction()?;
        tx.execute(
            "INSERT INTO jobs (job_id, request, state, message, created_at, updated_at) VALUES (?1, ?2, ?3, ?4, ?5, ?5)",
            params![job_id, serde_json::to_string(request)?, JobState::Queued.as_str(), "queued", now],
        )?;
        let ev = JobEvent {
            id: 1,
            kind: EventKind::State,
            state: JobState::Queued,
            message: "queued".into(),
            progress: Progress::default(),
        };
        insert_event(&tx, job_id, &ev)?;
        tx.commit()?;
        Ok(ev)
    }

    /// Appends an event, moving the job to `next` when given. Transitions are
    /// checked against the state machine inside the same transaction.
    pub fn record_event(
        &self,
        job_id: &str,
        kind: EventKind,
        next: Option<JobState>,
        message: &str,
        progress: Option<Progress>,
    ) -> Result<JobEvent, StoreError> {
        let mut conn = self.lock();
        let tx = conn.transaction()?;
        let current = load_job(&tx, job_id)?.ok_or_else(|| StoreError::UnknownJob(job_id.to_string()))?;
        let state = match next {
            Some(to) if !current.state.can_transition_to(to) => {
                return Err(StoreError::IllegalTransition {
                    from: current.state,
                    to,
                })
            }
            Some(to) => to,
            None if current.state.is_terminal() => {
                return Err(StoreError::IllegalTransition {
                    from: current.state,
                    to: current.state,
                })
            }
            None => current.state,
        };
        let progress = progress.unwrap_or(current.progress);
        let updated = Utc::now().max(current.updated_at);
        tx.execute(
            "UPDATE jobs SET state = ?2, message = ?3, papers_found = ?4, papers_fetched = ?5, papers_extracted = ?6, updated_at = ?7 WHERE job_id = ?1",
            params![
                job_id,
                state.as_str(),
                message,
                progress.papers_found as i64,
                progress.papers_fetched as i64,
                progress.papers_extracted as i64,
                ts(updated)
            ],
        )?;
        let seq: i64 = tx.query_row(
            "SELECT COALESCE(MAX(seq), 0) + 1 FROM events WHERE job_id = ?1",
            [job_id],
            |r| r.get(0),
        )?;
        let ev = JobEvent {
            id: seq as u64,
            kind,
            state,
            message: message.to_string(),
            progress,
        };
        insert_event(&tx, job_id, &ev)?;
        tx.commit()?;
        Ok(ev)
    }

    pub fn job(&self, job_id: &str) -> Result<Option<JobRecord>, StoreError> {
        load_job(&self.lock(), job_id)
    }

    /// Events with id greater than `after`, in order.
    pub fn events_after(&self, job_id: &str, after: u64) -> Result<Vec<JobEvent>, StoreError> {
        let conn = self.lock();
        let mut stmt = conn.prepare(
            "SELECT seq, kind, state, message, progress FROM events WHERE job_id = ?1 AND seq > ?2 ORDER BY seq",
        )?;
        let rows = stmt.query_map(params![job_id, after as i64], |r| {
            Ok((
                r.get::<_, i64>(0)?,
                r.get::<_, String>(1)?,
                r.get::<_, String>(2)?,
                r.get::<_, String>(3)?,
                r.get::<_, String>(4)?,
            ))
        })?;
        let mut out = Vec::new();
        for row in rows {
            let (seq, kind, state, message, progress) = row?;
            out.push(JobEvent {
                id: seq as u64,
                kind: if kind == "paper" { EventKind::Paper } else { EventKind::State },
                state: parse_state(&state)?,
                message,
                progress: serde_json::from_str(&progress)?,
            });
        }
        Ok(out)
    }

    pub fn last_event(&self, job_id: &str) -> Result<Option<JobEvent>, StoreError> {
        let conn = self.lock();
        let last: Option<i64> = conn
            .query_row("SELECT MAX(seq) FROM events WHERE job_id = ?1", [job_id], |r| r.get(0))
            .optional()?
            .flatten();
        drop(conn);
        match last {
            Some(seq) => Ok(self.events_after(job_id, seq as u64 - 1)?.pop()),
            None => Ok(None),
        }
    }

    pub fn put_results(&self, job_id: &str, body: &[u8]) -> Result<(), StoreError> {
        self.lock().execute(
            "INSERT OR REPLACE INTO results (job_id, body) VALUES (?1, ?2)",
            params![job_id, body],
        )?;
        Ok(())
    }

    pub fn results(&self, job_id: &str) -> Result<Option<Vec<u8>>, StoreError> {
        Ok(self
            .lock()
            .query_row("SELECT body FROM results WHERE job_id = ?1", [job_id], |r| r.get(0))
            .optional()?)
    }

    pub fn put_history(&self, job_id: &str, history: &SearchHistory) -> Result<(), StoreError> {
        self.lock().execute(
            "INSERT OR REPLACE INTO search_history (job_id, body) VALUES (?1, ?2)",
            params![job_id, serde_json::to_string(history)?],
        )?;
        Ok(())
    }

    pub fn history(&self, job_id: &str) -> Result<Option<SearchHistory>, StoreError> {
        let body: Option<String> = self
            .lock()
            .query_row("SELECT body FROM search_history WHERE job_id = ?1", [job_id], |r| r.get(0))
            .optional()?;
        Ok(body.map(|b| serde_json::from_str(&b)).transpose()?)
    }

    /// Marks every non-terminal job `Failed` with reason "interrupted".
    /// Returns the affected ids.
    pub fn fail_interrupted(&self) -> Result<Vec<String>, StoreError> {
        let ids: Vec<String> = {
            let conn = self.lock();
            let mut stmt = conn.prepare("SELECT job_id FROM jobs WHERE state NOT IN ('done', 'failed') ORDER BY created_at")?;
            let rows = stmt.query_map([], |r| r.get(0))?;
            rows.collect::<Result<_, _>>()?
        };
        for id in &ids {
            self.record_event(id, EventKind::State, Some(JobState::Failed), "interrupted", None)?;
        }
        Ok(ids)
    }
}

fn insert_event(conn: &Connection, job_id: &str, ev: &JobEvent) -> Result<(), StoreError> {
    conn.execute(
        "INSERT INTO events (job_id, seq, kind, state, message, progress) VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
        params![
            job_id,
            ev.id as i64,
            ev.kind.as_str(),
            ev.state.as_str(),
            ev.message,
            serde_json::to_string(&ev.progress)?
        ],
    )?;
    Ok(())
}

fn load_job(conn: &Connection, job_id: &str) -> Result<Option<JobRecord>, StoreError> {
    let row = conn
        .query_row(
            "SELECT request, state, message, papers_found, papers_fetched, papers_extracted, created_at, updated_at FROM jobs WHERE job_id = ?1",
            [job_id],
            |r| {
                Ok((
                    r.get::<_, String>(0)?,
                    r.get::<_, String>(1)?,
                    r.get::<_, String>(2)?,
                    r.get::<_, i64>(3)?,
                    r.get::<_, i64>(4)?,
                    r.get::<_, i64>(5)?,
                    r.get::<_, String>(6)?,
                    r.get::<_, String>(7)?,
                ))
            },
        )
        .optional()?;
    let Some((request, state, message, found, fetched, extracted, created, updated)) = row else {
        return Ok(None);
    };
    Ok(Some(JobRecord {
        job_id: job_id.to_string(),
        request: serde_json::from_str(&request)?,
        state: parse_state(&state)?,
        message,
        progress: Progress {
            papers_found: found as usize,
            papers_fetched: fetched as usize,
            papers_extracted: extracted as usize,
        },
        created_at: parse_ts(&created),
        updated_at: parse_ts(&updated),
    }))
}

fn to_io(e: rusqlite::Error) -> io::Error {
    io::Error::other(e)
}

/// Embeddings land in `embeddings_cache`; every other namespace in
/// `article_cache`.
impl KvStore for JobStore {
    fn get(&self, namespace: &str, key: &str) -> io::Result<Option<Vec<u8>>> {
        let conn = self.lock();
        let r = if namespace == "embeddings" {
            conn.query_row("SELECT value FROM embeddings_cache WHERE key = ?1", [key], |r| r.get(0))
        } else {
            conn.query_row(
                "SELECT value FROM article_cache WHERE namespace = ?1 AND key = ?2",
                [namespace, key],
                |r| r.get(0),
            )
        };
        r.optional().map_err(to_io)
    }

    fn put(&self, namespace: &str, key: &str, value: &[u8]) -> io::Result<()> {
        let conn = self.lock();
        let r = if namespace == "embeddings" {
            conn.execute(
                "INSERT OR REPLACE INTO embeddings_cache (key, value) VALUES (?1, ?2)",
                params![key, value],
            )
        } else {
            conn.execute(
                "INSERT OR REPLACE INTO article_cache (namespace, key, value) VALUES (?1, ?2, ?3)",
                params![namespace, key, value],
            )
        };
        r.map(|_| ()).map_err(to_io)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lifecycle_and_illegal_moves() {
        let s = JobStore::in_memory().unwrap();
        let req = AnalysisRequest::new("Fusarium venenatum", 5);
        s.insert_job("j", &req).unwrap();
        let job = s.job("j").unwrap().unwrap();
        assert_eq!((job.state, job.progress), (JobState::Queued, Progress::default()));
        assert_eq!(job.request, req);

        let err = s.record_event("j", EventKind::State, Some(JobState::Extracting), "x", None);
        assert!(matches!(err, Err(StoreError::IllegalTransition { .. })));
        s.record_event("j", EventKind::State, Some(JobState::Searching), "s", None).unwrap();
        let p = Progress {
            papers_found: 3,
            ..Progress::default()
        };
        let ev = s.record_event("j", EventKind::Paper, None, "p", Some(p)).unwrap();
        assert_eq!((ev.id, ev.state), (3, JobState::Searching));
        s.record_event("j", EventKind::State, Some(JobState::Failed), "boom", None).unwrap();
        assert!(s.record_event("j", EventKind::Paper, None, "late", None).is_err());
        assert!(s.record_event("j", EventKind::State, Some(JobState::Failed), "again", None).is_err());

        let evs = s.events_after("j", 0).unwrap();
        assert_eq!(evs.iter().map(|e| e.id).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert_eq!(evs[3].progress.papers_found, 3);
        assert_eq!(s.last_event("j").unwrap().unwrap().message, "boom");
        let job = s.job("j").unwrap().unwrap();
        assert!(job.updated_at >= job.created_at);
        assert!(s.job("nope").unwrap().is_none());
        assert!(matches!(
            s.record_event("nope", EventKind::Paper, None, "", None),
            Err(StoreError::UnknownJob(_))
        ));
    }

    #[test]
    fn restart_fails_unfinished_jobs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.sqlite");
        {
            let s = JobStore::open(&path).unwrap();
            s.insert_job("a", &AnalysisRequest::new("A b", 1)).unwrap();
            s.insert_job("b", &AnalysisRequest::new("A b", 1)).unwrap();
            s.record_event("b", EventKind::State, Some(JobState::Searching), "s", None).unwrap();
            s.put(crate::search::eutils::DEFAULT_BASE_URL, "k", b"v").unwrap();
        }
        let s = JobStore::open(&path).unwrap();
        let mut ids = s.fail_interrupted().unwrap();
        ids.sort();
        assert_eq!(ids, vec!["a", "b"]);
        let job = s.job("b").unwrap().unwrap();
        assert_eq!((job.state, job.message.as_str()), (JobState::Failed, "interrupted"));
        assert!(s.fail_interrupted().unwrap().is_empty());
        assert_eq!(s.get(crate::search::eutils::DEFAULT_BASE_URL, "k").unwrap(), Some(b"v".to_vec()));
    }

    #[test]
    fn kv_namespaces() {
        let s = JobStore::in_memory().unwrap();
        s.put("embeddings", "k", b"1").unwrap();
        s.put("article_meta", "k", b"2").unwrap();
        assert_eq!(s.get("embeddings", "k").unwrap(), Some(b"1".to_vec()));
        assert_eq!(s.get("article_meta", "k").unwrap(), Some(b"2".to_vec()));
        assert_eq!(s.get("other", "k").unwrap(), None);
    }
}
