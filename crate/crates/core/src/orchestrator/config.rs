//! Run configuration file (TOML).
//!
//! ```toml
//! graph = "graph.json"          # tpg/1 graph document
//! suite = "tasks.jsonl"         # JSON array or one task object per line
//! archive_dir = "runs/demo"
//! memory_path = "memory.jsonl"  # optional; defaults to <archive_dir>/memory.jsonl
//! mode = "exploratory"          # or "imitative"
//! max_iterations = 5
//! concurrency = 8
//! seed = 0
//!
//! [clustering]                  # eps, min_samples, dedupe_threshold
//! [grao]                        # k, n_pos, n_neg, pos_floor, neg_ceiling
//! [validation]                  # spot_check, full_suite, min_effectiveness
//! [ablations]                   # no_graph, no_structural_edits, no_clustering,
//!                               # random_clustering, no_grao
//!
//! [providers]
//! api_base = "http://localhost:8000/v1"   # else TPGO_API_BASE
//! timeout_secs = 120
//! hash_embeddings = false
//! [providers.parser]            # ModelConfig fields, one table per role
//! [providers.reflector]
//! [providers.optimizer]
//! [providers.embedder]
//!
//! [runner]
//! command = ["python3", "agent.py"]
//! timeout_secs = 600
//! ```
//!
//! Relative paths resolve against the directory holding the file.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::command::CommandRunner;
use super::{
    validate_suite, Ablations, DefaultEvaluator, LoopParams, Mode, Services, Task, ValidationParams,
};
use crate::cluster::ClusteringParams;
use crate::gateway::openai::{OpenAiCompatible, API_BASE_ENV, API_KEY_ENV};
use crate::gateway::{CallRole, ChatGateway, EmbeddingGateway, GatewayEnv, ModelConfig};
use crate::graph::{deserialize, TextualParameterGraph};
use crate::memory::GraoParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

fn default_max_iterations() -> u32 {
    5
}

fn default_concurrency() -> usize {
    8
}

fn default_provider_timeout() -> u64 {
    120
}

fn default_runner_timeout() -> u64 {
    600
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSettings {
    #[serde(default)]
    pub api_base: Option<String>,
    #[serde(default = "default_provider_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub hash_embeddings: bool,
    #[serde(default)]
    pub parser: ModelConfig,
    #[serde(default)]
    pub reflector: ModelConfig,
    #[serde(default)]
    pub optimizer: ModelConfig,
    #[serde(default)]
    pub embedder: ModelConfig,
}

impl Default for ProviderSettings {
    fn default() -> Self {
        Self {
            api_base: None,
            timeout_secs: default_provider_timeout(),
            hash_embeddings: false,
            parser: ModelConfig::default(),
            reflector: ModelConfig::default(),
            optimizer: ModelConfig::default(),
            embedder: ModelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunnerSettings {
    pub command: Vec<String>,
    #[serde(default = "default_runner_timeout")]
    pub timeout_secs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub graph: PathBuf,
    pub suite: PathBuf,
    pub archive_dir: PathBuf,
    #[serde(default)]
    pub memory_path: Option<PathBuf>,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: u32,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub clustering: ClusteringParams,
    #[serde(default)]
    pub grao: GraoParams,
    #[serde(default)]
    pub validation: ValidationParams,
    #[serde(default)]
    pub ablations: Ablations,
    #[serde(default)]
    pub providers: ProviderSettings,
    #[serde(default)]
    pub runner: Option<RunnerSettings>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Deserialize)]
struct ProvidersOnly {
    #[serde(default)]
    providers: ProviderSettings,
}

impl ProviderSettings {
    /// Reads only the `[providers]` table of a run configuration file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let doc: ProvidersOnly = toml::from_str::<toml::Table>(&read(path)?)
            .and_then(|mut t| {
                let providers = t
                    .remove("providers")
                    .unwrap_or(toml::Value::Table(toml::Table::new()));
                let mut only = toml::Table::new();
                only.insert("providers".into(), providers);
                only.try_into()
            })
            .map_err(|e| ConfigError::Parse {
                path: path.to_path_buf(),
                message: e.message().to_string(),
            })?;
        Ok(doc.providers)
    }

    fn chat_provider(&self) -> Result<Arc<OpenAiCompatible>, ConfigError> {
        let timeout = Duration::from_secs(self.timeout_secs);
        let base = match &self.api_base {
            Some(base) => base.clone(),
            None => std::env::var(API_BASE_ENV).map_err(|_| {
                ConfigError::Invalid(format!(
                    "providers.api_base is not set and {API_BASE_ENV} is undefined"
                ))
            })?,
        };
        Ok(Arc::new(OpenAiCompatible::new(
            base,
            std::env::var(API_KEY_ENV).ok(),
            timeout,
        )))
    }

    pub fn parser_gateway(&self, env: GatewayEnv) -> Result<ChatGateway, ConfigError> {
        self.parser
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("providers.parser: {e}")))?;
        Ok(ChatGateway::new(
            self.chat_provider()?,
            self.parser.clone(),
            CallRole::Parser,
            env,
        ))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: base_dir.to_path_buf(),
            message: e.message().to_string(),
        })?;
        resolve(base_dir, &mut config.graph);
        resolve(base_dir, &mut config.suite);
        resolve(base_dir, &mut config.archive_dir);
        if let Some(p) = config.memory_path.as_mut() {
            resolve(base_dir, p);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.max_iterations == 0 {
            return invalid("max_iterations must be >= 1".into());
        }
        if self.concurrency == 0 {
            return invalid("concurrency must be >= 1".into());
        }
        self.clustering
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let p = &self.providers;
        for (role, m) in [
            ("parser", &p.parser),
            ("reflector", &p.reflector),
            ("optimizer", &p.optimizer),
            ("embedder", &p.embedder),
        ] {
            m.validate()
                .map_err(|e| ConfigError::Invalid(format!("providers.{role}: {e}")))?;
        }
        if self.runner.as_ref().is_some_and(|r| r.command.is_empty()) {
            return invalid("runner.command is empty".into());
        }
        Ok(())
    }

    pub fn loop_params(&self) -> LoopParams {
        LoopParams {
            mode: self.mode,
            max_iterations: self.max_iterations,
            concurrency: self.concurrency,
            seed: self.seed,
            clustering: self.clustering,
            grao: self.grao,
            validation: self.validation,
            ablations: self.ablations,
        }
    }

    pub fn memory_path(&self) -> PathBuf {
        self.memory_path
            .clone()
            .unwrap_or_else(|| self.archive_dir.join("memory.jsonl"))
    }

    pub fn load_graph(&self) -> Result<TextualParameterGraph, ConfigError> {
        deserialize(&read(&self.graph)?).map_err(|e| ConfigError::Parse {
            path: self.graph.clone(),
            message: e.to_string(),
        })
    }

    pub fn load_suite(&self) -> Result<Vec<Task>, ConfigError> {
        let tasks = parse_suite(&read(&self.suite)?).map_err(|message| ConfigError::Parse {
            path: self.suite.clone(),
            message,
        })?;
        validate_suite(&tasks, self.mode)
            .map_err(|e| ConfigError::Invalid(format!("{}: {e}", self.suite.display())))?;
        Ok(tasks)
    }

    /// Gateways and runner for a live run. All gateways share `env`.
    pub fn services(&self, env: GatewayEnv) -> Result<Services, ConfigError> {
        let runner = self
            .runner
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid("missing [runner] section".into()))?;
        let runner = CommandRunner::new(&runner.command, Duration::from_secs(runner.timeout_secs))
            .map_err(ConfigError::Invalid)?;
        let provider = self.providers.chat_provider()?;
        let p = &self.providers;
        let embedder = if p.hash_embeddings {
            EmbeddingGateway::hashing(self.seed, env.clone())
        } else {
            EmbeddingGateway::new(provider.clone(), p.embedder.clone(), env.clone())
        };
        Ok(Services {
            runner: Arc::new(runner),
            evaluator: Arc::new(DefaultEvaluator),
            reflector: ChatGateway::new(
                provider.clone(),
                p.reflector.clone(),
                CallRole::Reflector,
                env.clone(),
            ),
            optimizer: ChatGateway::new(
                provider,
                p.optimizer.clone(),
                CallRole::Optimizer,
                env.clone(),
            ),
            embedder,
            ledger: env.ledger.clone(),
            clock: env.clock.clone(),
        })
    }
}

/// A JSON array of tasks, or one task object per non-blank line.
pub(crate) fn parse_suite(text: &str) -> Result<Vec<Task>, String> {
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(text).map_err(|e| e.to_string());
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}
