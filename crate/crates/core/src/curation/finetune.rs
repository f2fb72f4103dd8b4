//! Thin client for an OpenAI-compatible fine-tuning API.

use std::time::Duration;

use reqwest::multipart::{Form, Part};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub const DEFAULT_EPOCHS: u32 = 10;
pub const DEFAULT_FINETUNE_BASE_URL: &str = "https://api.openai.com/v1";

#[derive(Debug, Error)]
pub enum FineTuneError {
    #[error("transport error: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("fine-tuning API returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("job {id} ended with status {status}")]
    JobFailed { id: String, status: String },
    #[error("job {0} still running after polling limit")]
    Timeout(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineTuneJob {
    pub id: String,
    pub status: String,
    #[serde(default)]
    pub fine_tuned_model: Option<String>,
}

impl FineTuneJob {
    pub fn is_terminal(&self) -> bool {
        matches!(self.status.as_str(), "succeeded" | "failed" | "cancelled")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub id: String,
    pub fine_tuned_model_checkpoint: String,
    pub step_number: u64,
}

pub struct FineTuneClient {
    http: reqwest::Client,
    base_url: String,
    api_key: Option<String>,
}

impl FineTuneClient {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            http: reqwest::Client::new(),
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.filter(|k| !k.is_empty()),
        }
    }

    /// Reads `FINETUNE_BASE_URL` and `FINETUNE_API_KEY`.
    pub fn from_env() -> Self {
        Self::new(
            std::env::var("FINETUNE_BASE_URL").unwrap_or_else(|_| DEFAULT_FINETUNE_BASE_URL.to_string()),
            std::env::var("FINETUNE_API_KEY").ok(),
        )
    }

    fn auth(&self, req: reqwest::RequestBuilder) -> reqwest::RequestBuilder {
        match &self.api_key {
            Some(k) => req.bearer_auth(k),
            None => req,
        }
    }

    async fn decode<T: for<'de> Deserialize<'de>>(resp: reqwest::Response) -> Result<T, FineTuneError> {
        let status = resp.status();
        let body = resp.text().await?;
        if !status.is_success() {
            return Err(FineTuneError::Http {
                status: status.as_u16(),
                body,
            });
        }
        serde_json::from_str(&body).map_err(|e| FineTuneError::Malformed(e.to_string()))
    }

    /// Uploads a JSONL file and returns its file id.
    pub async fn upload_file(&self, filename: &str, jsonl: Vec<u8>) -> Result<String, FineTuneError> {
        let form = Form::new()
            .text("purpose", "fine-tune")
            .part("file", Part::bytes(jsonl).file_name(filename.to_string()));
        let resp = self
            .auth(self.http.post(format!("{}/files", self.base_url)))
            .multipart(form)
            .send()
            .await?;
        let v: Value = Self::decode(resp).await?;
        v["id"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| FineTuneError::Malformed("file id missing".into()))
    }

    pub async fn create_job(
        &self,
        model: &str,
        training_file: &str,
        validation_file: Option<&str>,
        epochs: u32,
    ) -> Result<FineTuneJob, FineTuneError> {
        let mut body = json!({
            "model": model,
            "training_file": training_file,
            "hyperparameters": {"n_epochs": epochs},
        });
        if let Some(v) = validation_file {
            body["validation_file"] = json!(v);
        }
        let resp = self
            .auth(self.http.post(format!("{}/fine_tuning/jobs", self.base_url)))
            .json(&body)
            .send()
            .await?;
        Self::decode(resp).await
    }

    pub async fn get_job(&self, id: &str) -> Result<FineTuneJob, FineTuneError> {
        let resp = self
            .auth(self.http.get(format!("{}/fine_tuning/jobs/{id}", self.base_url)))
            .send()
            .await?;
        Self::decode(resp).await
    }

    /// Polls until the job reaches a terminal state.
    pub async fn wait(&self, id: &str, interval: Duration, max_polls: usize) -> Result<FineTuneJob, FineTuneError> {
        for _ in 0..max_polls {
            let job = self.get_job(id).await?;
            if job.is_terminal() {
                return if job.status == "succeeded" {
                    Ok(job)
                } else {
                    Err(FineTuneError::JobFailed {
                        id: job.id,
                        status: job.status,
                    })
                };
            }
            tokio::time::sleep(interval).await;
        }
        Err(FineTuneError::Timeout(id.to_string()))
    }

    /// Saved checkpoints, oldest step first.
    pub async fn list_checkpoints(&self, id: &str) -> Result<Vec<Checkpoint>, FineTuneError> {
        #[derive(Deserialize)]
        struct Page {
            data: Vec<Checkpoint>,
        }
        let resp = self
            .auth(self.http.get(format!("{}/fine_tuning/jobs/{id}/checkpoints", self.base_url)))
            .send()
            .await?;
        let mut page: Page = Self::decode(resp).await?;
        page.data.sort_by_key(|c| c.step_number);
        Ok(page.data)
    }
}
