//! Application configuration: a TOML file with every key optional, then
//! environment variables on top.
//!
//! ```toml
//! [server]
//! port = 8080
//! db_path = "mpminer.db"
//! max_papers_ceiling = 25
//! queue_capacity = 8
//! max_running = 2
//!
//! [search]
//! threshold = 3
//! per_query_limit = 20
//!
//! [agent]
//! model = "gpt-4o"
//! temperature = 0.0
//! strategy = "two_stage_prompted"
//! max_in_flight = 4
//! gate = { min_chars = 80, max_sparse_blocks = 3 }
//!
//! [tox]
//! dataset_path = "ames.csv"
//!
//! [providers]
//! llm_base_url = "https://api.openai.com/v1"
//!
//! [mock]
//! search_fixtures = "fixtures/search.json"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentConfig, GateConfig};
use crate::document::TokenBudget;
use crate::domain::{AgentVariant, DomainError, Strategy};
use crate::search::SearchConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("environment variable {var}: cannot parse '{value}'")]
    Env { var: &'static str, value: String },
    #[error("invalid value: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub port: u16,
    pub db_path: PathBuf,
    pub max_papers_ceiling: u32,
    /// Jobs waiting for a runner slot.
    pub queue_capacity: usize,
    /// Jobs executing at once.
    pub max_running: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            port: 8080,
            db_path: PathBuf::from("mpminer.db"),
            max_papers_ceiling: 25,
            queue_capacity: 8,
            max_running: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentSettings {
    pub model: String,
    pub temperature: f64,
    pub strategy: Strategy,
    pub checkpoint_epoch: Option<u32>,
    pub gate: GateConfig,
    pub max_in_flight: usize,
    /// Overrides the per-model default token budget.
    pub token_budget: Option<usize>,
}

impl Default for AgentSettings {
    fn default() -> Self {
        Self {
            model: "gpt-4o".into(),
            temperature: 0.0,
            strategy: Strategy::TwoStagePrompted,
            checkpoint_epoch: None,
            gate: GateConfig::default(),
            max_in_flight: 4,
            token_budget: None,
        }
    }
}

impl AgentSettings {
    pub fn variant(&self) -> Result<AgentVariant, DomainError> {
        AgentVariant::new(&self.model, self.strategy, self.temperature, self.checkpoint_epoch)
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            gate: self.gate,
            max_in_flight: self.max_in_flight,
        }
    }

    pub fn budget_for(&self, model: &str) -> TokenBudget {
        self.token_budget
            .and_then(TokenBudget::new)
            .unwrap_or_else(|| TokenBudget::for_model(model))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToxSettings {
    pub dataset_path: Option<PathBuf>,
}

/// Endpoints and credentials of the external services. `None` means the
/// adapter's built-in default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderSettings {
    pub pubmed_base_url: Option<String>,
    pub pubmed_api_key: Option<String>,
    pub llm_base_url: Option<String>,
    pub llm_api_key: Option<String>,
    pub embed_base_url: Option<String>,
    pub embed_api_key: Option<String>,
    pub biocyc_base_url: Option<String>,
    pub biocyc_user: Option<String>,
    pub biocyc_password: Option<String>,
}

/// Fixture files that replace live providers; any that is set wins over
/// the corresponding network adapter.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockSettings {
    pub search_fixtures: Option<PathBuf>,
    pub chat_fixtures: Option<PathBuf>,
    pub pathway_fixtures: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub server: ServerConfig,
    pub search: SearchConfig,
    pub agent: AgentSettings,
    pub tox: ToxSettings,
    pub providers: ProviderSettings,
    pub mock: MockSettings,
}

impl AppConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    /// Reads the file if given, then applies the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                Self::from_toml_str(&text)?
            }
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overrides keys from `lookup`, which maps a variable name to its value.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        fn parsed<T: std::str::FromStr>(var: &'static str, v: String) -> Result<T, ConfigError> {
            v.trim().parse().map_err(|_| ConfigError::Env { var, value: v })
        }
        let get = |k: &str| lookup(k).filter(|v| !v.is_empty());

        if let Some(v) = get("MPMINER_PORT") {
            self.server.port = parsed("MPMINER_PORT", v)?;
        }
        if let Some(v) = get("MPMINER_DB_PATH") {
            self.server.db_path = PathBuf::from(v);
        }
        if let Some(v) = get("MPMINER_MAX_PAPERS_CEILING") {
            self.server.max_papers_ceiling = parsed("MPMINER_MAX_PAPERS_CEILING", v)?;
        }
        if let Some(v) = get("MPMINER_QUEUE_CAPACITY") {
            self.server.queue_capacity = parsed("MPMINER_QUEUE_CAPACITY", v)?;
        }
        if let Some(v) = get("MPMINER_MAX_RUNNING") {
            self.server.max_running = parsed("MPMINER_MAX_RUNNING", v)?;
        }
        if let Some(v) = get("MPMINER_MODEL") {
            self.agent.model = v;
        }
        if let Some(v) = get("MPMINER_TEMPERATURE") {
            self.agent.temperature = parsed("MPMINER_TEMPERATURE", v)?;
        }
        if let Some(v) = get("MPMINER_STRATEGY") {
            self.agent.strategy = serde_json::from_value(serde_json::Value::String(v.clone()))
                .map_err(|_| ConfigError::Env {
                    var: "MPMINER_STRATEGY",
                    value: v,
                })?;
        }
        if let Some(v) = get("MPMINER_TOX_DATASET") {
            self.tox.dataset_path = Some(PathBuf::from(v));
        }

        let p = &mut self.providers;
        for (var, slot) in [
            ("PUBMED_BASE_URL", &mut p.pubmed_base_url),
            ("PUBMED_API_KEY", &mut p.pubmed_api_key),
            ("LLM_BASE_URL", &mut p.llm_base_url),
            ("LLM_API_KEY", &mut p.llm_api_key),
            ("EMBED_BASE_URL", &mut p.embed_base_url),
            ("EMBED_API_KEY", &mut p.embed_api_key),
            ("BIOCYC_BASE_URL", &mut p.biocyc_base_url),
            ("BIOCYC_USER", &mut p.biocyc_user),
            ("BIOCYC_PASSWORD", &mut p.biocyc_password),
        ] {
            if let Some(v) = get(var) {
                *slot = Some(v);
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.server.max_papers_ceiling == 0 {
            return Err(ConfigError::Invalid("server.max_papers_ceiling must be at least 1".into()));
        }
        if self.server.max_running == 0 {
            return Err(ConfigError::Invalid("server.max_running must be at least 1".into()));
        }
        self.agent
            .variant()
            .map_err(|e| ConfigError::Invalid(format!("agent: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn defaults_and_partial_file() {
        let cfg = AppConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, AppConfig::default());
        assert_eq!(cfg.server.max_papers_ceiling, 25);
        assert_eq!((cfg.server.queue_capacity, cfg.server.max_running), (8, 2));
        assert_eq!(cfg.agent.strategy, Strategy::TwoStagePrompted);

        let cfg = AppConfig::from_toml_str(
            "[server]\nport = 9000\n[agent]\nstrategy = \"single_stage_base\"\ngate = { min_chars = 10 }\n[search]\nthreshold = 5\n",
        )
        .unwrap();
        assert_eq!(cfg.server.port, 9000);
        assert_eq!(cfg.server.db_path, PathBuf::from("mpminer.db"));
        assert_eq!(cfg.agent.strategy, Strategy::SingleStageBase);
        assert_eq!(cfg.agent.gate.min_chars, 10);
        assert_eq!(cfg.agent.gate.max_sparse_blocks, 3);
        assert_eq!(cfg.search.threshold, 5);
        assert!(AppConfig::from_toml_str("[server]\nport = \"x\"").is_err());
    }

    #[test]
    fn env_wins_over_file() {
        let mut cfg = AppConfig::from_toml_str("[server]\nport = 9000\n[agent]\nmodel = \"a\"").unwrap();
        let env: HashMap<&str, &str> = [
            ("MPMINER_PORT", "7000"),
            ("MPMINER_STRATEGY", "fine_tuned_checkpoint"),
            ("LLM_API_KEY", "k"),
            ("MPMINER_MODEL", ""),
        ]
        .into();
        cfg.apply_env(|k| env.get(k).map(|s| s.to_string())).unwrap();
        assert_eq!(cfg.server.port, 7000);
        assert_eq!(cfg.agent.model, "a");
        assert_eq!(cfg.agent.strategy, Strategy::FineTunedCheckpoint);
        assert_eq!(cfg.providers.llm_api_key.as_deref(), Some("k"));
        assert!(cfg.validate().is_err());

        let err = cfg.apply_env(|k| (k == "MPMINER_PORT").then(|| "eighty".to_string()));
        assert!(matches!(err, Err(ConfigError::Env { var: "MPMINER_PORT", .. })));
    }

    #[test]
    fn budget_override() {
        let mut a = AgentSettings::default();
        assert_eq!(a.budget_for("gpt-4o"), TokenBudget::for_model("gpt-4o"));
        a.token_budget = Some(500);
        assert_eq!(a.budget_for("gpt-4o"), TokenBudget::new(500).unwrap());
    }
}
